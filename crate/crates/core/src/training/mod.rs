//! Two-step alternating optimization.
//!
//! Every iteration first updates the view discriminator on the view loss
//! (encoder and classifier untouched), then freezes the discriminator and
//! updates encoder and classifier on `l_loc + alpha * l_adv`, where the
//! adversarial gradient reaches the encoder only through the feature maps.

pub mod checkpoint;
pub mod log;
pub mod schedule;

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use ndarray::{Array2, Array4, ArrayD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use skyalign_nn::param::join;
use skyalign_nn::{zero_grads, Adam, AdamConfig, Mode, Module, Param, Sgd, SgdConfig};

use crate::config::{Config, ModelConfig};
use crate::dataset::{batch_tensor, sample_batch, Dataset, ImageSample, View};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::heads::{LocationClassifier, ViewDiscriminator};
use crate::losses::{
    adversarial_loss_from_logits, location_loss_from_logits, view_loss_from_logits, LossReport,
};

pub use self::log::{LogRow, TrainLog};
pub use self::schedule::{alpha_at, lr_at, lr_at_named, ParamGroup, ScheduleConfig, Variant};

/// Stream of the seed's ChaCha generator used for parameter init; training
/// randomness (batches, flips, dropout) uses [`TRAIN_STREAM`].
pub const INIT_STREAM: u64 = 0;
pub const TRAIN_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// `None` means one pass worth of samples: `ceil(|train| / batch_size)`.
    pub steps_per_epoch: Option<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Run both steps on the same batch; otherwise Step 2 draws a fresh one.
    pub same_batch: bool,
    /// Without the discriminator the loop is plain location classification.
    pub use_discriminator: bool,
    pub hflip: bool,
    /// Write a checkpoint every this many epochs (0: final only).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 420,
            batch_size: 16,
            steps_per_epoch: None,
            momentum: 0.9,
            weight_decay: 5e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            same_batch: true,
            use_discriminator: true,
            hflip: true,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("train.batch_size must be at least 2".into()));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::Config("train.steps_per_epoch must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2)
        {
            return Err(Error::Config("momentum and Adam betas must lie in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("weight decay must be >= 0 and Adam eps > 0".into()));
        }
        Ok(())
    }

    pub fn steps_for(&self, train_len: usize) -> usize {
        self.steps_per_epoch.unwrap_or_else(|| train_len.div_ceil(self.batch_size).max(1))
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig { momentum: self.momentum, weight_decay: self.weight_decay }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { beta1: self.adam_beta1, beta2: self.adam_beta2, eps: self.adam_eps, weight_decay: 0.0 }
    }
}

/// Encoder, location classifier and view discriminator.
#[derive(Debug, Clone)]
pub struct Model {
    pub encoder: Encoder,
    pub classifier: LocationClassifier,
    pub discriminator: ViewDiscriminator,
}

impl Model {
    pub fn new<R: rand::Rng + ?Sized>(cfg: &ModelConfig, num_locations: usize, rng: &mut R) -> Result<Self> {
        let encoder = Encoder::new(&cfg.encoder, rng)?;
        let classifier = LocationClassifier::new(cfg.encoder.num_rings, cfg.encoder.d_embed, num_locations, cfg.dropout, rng)?;
        let discriminator =
            ViewDiscriminator::new(encoder.feature_channels(), encoder.feature_size(), &cfg.discriminator, rng)?;
        Ok(Self { encoder, classifier, discriminator })
    }

    /// Copy of every tensor (trainable and buffer) keyed by path.
    pub fn snapshot(&mut self) -> BTreeMap<String, ArrayD<f64>> {
        snapshot(self, "")
    }
}

impl Module for Model {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.encoder.visit_params(&join(prefix, "encoder"), f);
        self.classifier.visit_params(&join(prefix, "classifier"), f);
        self.discriminator.visit_params(&join(prefix, "discriminator"), f);
    }
}

pub fn snapshot(module: &mut dyn Module, prefix: &str) -> BTreeMap<String, ArrayD<f64>> {
    let mut out = BTreeMap::new();
    module.visit_params(prefix, &mut |name, p| {
        out.insert(name.to_string(), p.value.clone());
    });
    out
}

/// Trainable tensors only.
pub fn snapshot_trainable(module: &mut dyn Module, prefix: &str) -> BTreeMap<String, ArrayD<f64>> {
    let mut out = BTreeMap::new();
    module.visit_params(prefix, &mut |name, p| {
        if p.is_trainable() {
            out.insert(name.to_string(), p.value.clone());
        }
    });
    out
}

/// A non-finite loss and the response to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Incident {
    pub epoch: usize,
    pub global_step: u64,
    pub phase: String,
    pub loss: String,
    pub halved: Vec<ParamGroup>,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub sgd: Sgd,
    pub adam: Adam,
    /// Next epoch to run.
    pub epoch: usize,
    pub global_step: u64,
    pub rng: ChaCha8Rng,
    /// Multiplier on the scheduled rate, lowered after an incident.
    pub lr_scale: [f64; 4],
    pub lr_halved: [bool; 4],
    pub incidents: Vec<Incident>,
    pub num_locations: usize,
    /// How the backbone was initialized ("random" or the pretrained source).
    pub init: String,
}

impl TrainState {
    pub fn new(config: &Config, num_locations: usize) -> Result<Self> {
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
        init_rng.set_stream(INIT_STREAM);
        let model_cfg = ModelConfig { encoder: config.encoder_config(), ..config.model.clone() };
        let mut model = Model::new(&model_cfg, num_locations, &mut init_rng)?;
        let init = match &config.model.pretrained {
            Some(path) => {
                checkpoint::load_backbone(&mut model, path)?;
                format!("pretrained:{}", path.display())
            }
            None => "random".to_string(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(TRAIN_STREAM);
        Ok(Self {
            model,
            sgd: Sgd::new(config.train.sgd()),
            adam: Adam::new(config.train.adam()),
            epoch: 0,
            global_step: 0,
            rng,
            lr_scale: [1.0; 4],
            lr_halved: [false; 4],
            incidents: Vec::new(),
            num_locations,
            init,
        })
    }

    /// Effective rates for `epoch`: schedule times incident scaling.
    pub fn lrs(&self, epoch: usize, schedule: &ScheduleConfig) -> [f64; 4] {
        ParamGroup::ALL.map(|g| lr_at(epoch, g, schedule) * self.lr_scale[g.index()])
    }

    fn record_incident(&mut self, phase: &str, loss: f64, groups: &[ParamGroup]) -> Result<()> {
        if let Some(g) = groups.iter().find(|g| self.lr_halved[g.index()]) {
            return Err(Error::Training(format!(
                "non-finite {phase} loss ({loss}) at step {} after the {} learning rate was already halved",
                self.global_step,
                g.name()
            )));
        }
        for g in groups {
            self.lr_scale[g.index()] *= 0.5;
            self.lr_halved[g.index()] = true;
        }
        ::log::warn!("non-finite {phase} loss ({loss}) at step {}; step aborted, learning rate halved", self.global_step);
        self.incidents.push(Incident {
            epoch: self.epoch,
            global_step: self.global_step,
            phase: phase.to_string(),
            loss: loss.to_string(),
            halved: groups.to_vec(),
        });
        Ok(())
    }
}

/// Per-iteration settings derived from the schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSettings {
    pub alpha: f64,
    /// Scheduled rates before incident scaling, by [`ParamGroup::index`].
    pub lrs: [f64; 4],
    pub use_discriminator: bool,
    pub hflip: bool,
}

impl StepSettings {
    pub fn for_epoch(epoch: usize, config: &Config) -> Self {
        Self {
            alpha: alpha_at(epoch, &config.schedule),
            lrs: ParamGroup::ALL.map(|g| lr_at(epoch, g, &config.schedule)),
            use_discriminator: config.train.use_discriminator,
            hflip: config.train.hflip,
        }
    }
}

/// Points inside one iteration at which a hook observes the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepEvent {
    DiscriminatorStepStart,
    DiscriminatorStepEnd,
    EncoderStepStart,
    EncoderStepEnd,
}

fn labels_and_views(batch: &[&ImageSample]) -> (Vec<usize>, Vec<View>) {
    (batch.iter().map(|s| s.location_id).collect(), batch.iter().map(|s| s.view).collect())
}

fn check_views(batch: &[&ImageSample]) -> Result<()> {
    let has = |v: View| batch.iter().any(|s| s.view == v);
    if has(View::Uav) && has(View::Satellite) {
        Ok(())
    } else {
        Err(Error::Data("training batch must contain both views".into()))
    }
}

/// Step 1: discriminator update on the view loss. Returns the batch-sum loss,
/// or `None` if it was non-finite and the update was skipped.
fn discriminator_step(
    discriminator: &mut ViewDiscriminator,
    adam: &mut Adam,
    maps: &Array4<f64>,
    views: &[View],
    lr: f64,
) -> Result<(f64, bool)> {
    zero_grads(discriminator);
    let logits = discriminator.forward_logits(maps, Mode::Train)?;
    let (loss, grad) = view_loss_from_logits(&logits, views);
    if !loss.is_finite() {
        return Ok((loss, false));
    }
    let n = views.len() as f64;
    discriminator.backward(&(grad / n), false);
    adam.step(discriminator, "discriminator", lr);
    zero_grads(discriminator);
    Ok((loss, true))
}

/// One alternating iteration. `batch2` is the Step 2 batch when
/// `same_batch` is off.
pub fn train_step(
    state: &mut TrainState,
    batch: &[&ImageSample],
    batch2: Option<&[&ImageSample]>,
    settings: &StepSettings,
) -> Result<LossReport> {
    train_step_observed(state, batch, batch2, settings, &mut |_, _| {})
}

/// [`train_step`] with a hook called at each phase boundary.
pub fn train_step_observed(
    state: &mut TrainState,
    batch: &[&ImageSample],
    batch2: Option<&[&ImageSample]>,
    settings: &StepSettings,
    hook: &mut dyn FnMut(StepEvent, &mut Model),
) -> Result<LossReport> {
    check_views(batch)?;
    if let Some(b) = batch2 {
        check_views(b)?;
    }
    if !(settings.alpha >= 0.0) {
        return Err(Error::Config(format!("adversarial weight must be >= 0, got {}", settings.alpha)));
    }
    let lr = |g: ParamGroup| settings.lrs[g.index()] * state.lr_scale[g.index()];
    let lrs = ParamGroup::ALL.map(lr);
    let flip = settings.hflip;
    zero_grads(&mut state.model);

    hook(StepEvent::DiscriminatorStepStart, &mut state.model);
    let (labels, views) = labels_and_views(batch);
    let x = batch_tensor(batch, flip.then_some(&mut state.rng))?;
    let out = state.model.encoder.forward(&x, Mode::Train)?;
    let mut view_loss = 0.0;
    if settings.use_discriminator {
        // the maps are treated as constants here: no gradient reaches the encoder
        let (loss, applied) = discriminator_step(
            &mut state.model.discriminator,
            &mut state.adam,
            &out.maps,
            &views,
            lrs[ParamGroup::Discriminator.index()],
        )?;
        view_loss = loss;
        if !applied {
            state.record_incident("view", loss, &[ParamGroup::Discriminator])?;
            state.global_step += 1;
            return LossReport::new(f64::NAN, loss, f64::NAN, settings.alpha, batch.len());
        }
    }
    hook(StepEvent::DiscriminatorStepEnd, &mut state.model);

    hook(StepEvent::EncoderStepStart, &mut state.model);
    let (labels, views, out, n) = match batch2 {
        Some(b2) => {
            let (l2, v2) = labels_and_views(b2);
            let x2 = batch_tensor(b2, flip.then_some(&mut state.rng))?;
            let out2 = state.model.encoder.forward(&x2, Mode::Train)?;
            (l2, v2, out2, b2.len())
        }
        None => (labels, views, out, batch.len()),
    };
    let scale = 1.0 / n as f64;
    let model = &mut state.model;
    let logits = model.classifier.forward_logits(&out.parts, Mode::Train, &mut state.rng);
    let (location_loss, d_logits) = location_loss_from_logits(&logits, &labels);
    let (adversarial_loss, d_maps) = if settings.use_discriminator {
        let adv_logits = model.discriminator.forward_logits(&out.maps, Mode::Train)?;
        let (loss, grad) = adversarial_loss_from_logits(&adv_logits, &views);
        let d_maps = model.discriminator.backward(&(grad * (settings.alpha * scale)), true);
        // discriminator gradients from this pass are discarded: it is frozen in Step 2
        zero_grads(&mut model.discriminator);
        (loss, d_maps)
    } else {
        (0.0, None)
    };
    let combined = location_loss + settings.alpha * adversarial_loss;
    if !combined.is_finite() {
        state.record_incident(
            "combined",
            combined,
            &[ParamGroup::Backbone, ParamGroup::EncoderRest, ParamGroup::Classifier],
        )?;
        zero_grads(&mut state.model);
        state.global_step += 1;
        return LossReport::new(location_loss, view_loss, adversarial_loss, settings.alpha, n);
    }
    let d_logits: Vec<Array2<f64>> = d_logits.into_iter().map(|g| g * scale).collect();
    let d_parts = model.classifier.backward(&d_logits);
    model.encoder.backward(&d_parts, d_maps.as_ref());
    state.sgd.step(&mut model.encoder.backbone, "encoder.backbone", lrs[ParamGroup::Backbone.index()]);
    state.sgd.step(&mut model.encoder.branches, "encoder.branches", lrs[ParamGroup::EncoderRest.index()]);
    state.sgd.step(&mut model.classifier, "classifier", lrs[ParamGroup::Classifier.index()]);
    zero_grads(&mut state.model);
    hook(StepEvent::EncoderStepEnd, &mut state.model);

    state.global_step += 1;
    LossReport::new(location_loss, view_loss, adversarial_loss, settings.alpha, n)
}

/// Run only Step 1 on a fixed batch (used to check that the view loss
/// decreases under repeated discriminator updates).
pub fn discriminator_only_step(state: &mut TrainState, batch: &[&ImageSample], lr: f64) -> Result<f64> {
    check_views(batch)?;
    let (_, views) = labels_and_views(batch);
    let x = batch_tensor::<ChaCha8Rng>(batch, None)?;
    let maps = state.model.encoder.backbone_infer(&x)?;
    let (loss, _) = discriminator_step(&mut state.model.discriminator, &mut state.adam, &maps, &views, lr)?;
    Ok(loss)
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Where checkpoints and the log go; `None` keeps everything in memory.
    pub out_dir: Option<PathBuf>,
    pub resume: Option<PathBuf>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub log: TrainLog,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: Option<PathBuf>,
}

pub const LOG_FILE: &str = "train_log.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn checkpoint_name(epoch: usize) -> String {
    format!("epoch{epoch:04}.ckpt")
}

/// Epoch loop around [`train_step`].
pub fn train(config: &Config, data: &Dataset, opts: &TrainOptions) -> Result<TrainOutcome> {
    config.validate()?;
    data.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let mut state = match &opts.resume {
        Some(path) => {
            let state = checkpoint::load_state(path, config)?;
            if state.num_locations != data.num_locations {
                return Err(Error::Shape(format!(
                    "checkpoint has {} locations, data has {}",
                    state.num_locations, data.num_locations
                )));
            }
            state
        }
        None => TrainState::new(config, data.num_locations)?,
    };
    let mut log = TrainLog::new(config);
    if let (Some(dir), Some(_)) = (&opts.out_dir, &opts.resume) {
        let path = dir.join(LOG_FILE);
        if path.exists() {
            log.rows = TrainLog::read(&path)?.rows.into_iter().filter(|r| r.epoch < state.epoch).collect();
        }
    }
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let steps = config.train.steps_for(data.len());
    let bs = config.train.batch_size;
    let mut checkpoints = Vec::new();

    while state.epoch < config.train.epochs {
        let epoch = state.epoch;
        let settings = StepSettings::for_epoch(epoch, config);
        for step in 0..steps {
            let batch = sample_batch(data, bs, &mut state.rng)?;
            let batch2 = if config.train.same_batch { None } else { Some(sample_batch(data, bs, &mut state.rng)?) };
            let report = train_step(&mut state, &batch, batch2.as_deref(), &settings)?;
            log.rows.push(LogRow { epoch, step, report, lrs: state.lrs(epoch, &config.schedule) });
        }
        state.epoch += 1;
        let done = state.epoch;
        ::log::info!("epoch {done}/{} alpha {} {}", config.train.epochs, settings.alpha, log.epoch_summary(epoch));
        if let Some(dir) = &opts.out_dir {
            log.write(&dir.join(LOG_FILE))?;
            if config.train.checkpoint_every > 0 && done % config.train.checkpoint_every == 0 && done < config.train.epochs {
                let path = dir.join(checkpoint_name(done));
                checkpoint::save(&path, &mut state, config)?;
                checkpoints.push(path);
            }
        }
    }

    let final_checkpoint = match &opts.out_dir {
        Some(dir) => {
            log.write(&dir.join(LOG_FILE))?;
            let path = dir.join(FINAL_CHECKPOINT);
            checkpoint::save(&path, &mut state, config)?;
            Some(path)
        }
        None => None,
    };
    Ok(TrainOutcome { state, log, checkpoints, final_checkpoint })
}

/// Convenience for callers that only need the trained state.
pub fn train_in_memory(config: &Config, data: &Dataset) -> Result<TrainOutcome> {
    train(config, data, &TrainOptions::default())
}
