//! Flat `key = value` run configuration.
//!
//! A file may set any subset of the keys in [`KEYS`]; unset keys keep the
//! value of the preset named by the optional `preset` line (default
//! `toy`). Unknown keys are fatal. [`Config::to_text`] writes every key in
//! a fixed order, and the config hash is the SHA-256 of that text.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::ToyConfig;
use crate::encoder::{BackboneKind, EncoderConfig};
use crate::error::{Error, Result};
use crate::heads::{DiscriminatorConfig, Pooling};
use crate::retrieval::Protocol;
use crate::training::{ParamGroup, ScheduleConfig, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DataSource {
    Toy,
    University1652,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub source: DataSource,
    pub root: Option<PathBuf>,
    /// Side of the square network input; images are resized to it.
    pub image_size: usize,
    /// Decode every image at load time rather than per batch.
    pub eager: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub dropout: f64,
    pub discriminator: DiscriminatorConfig,
    /// Checkpoint whose backbone tensors initialize the encoder.
    pub pretrained: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub protocols: Vec<Protocol>,
    /// Gallery entries per query in the ranked-result dump.
    pub top_k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub preset: String,
    pub seed: u64,
    pub data: DataConfig,
    pub toy: ToyConfig,
    /// Seed of the synthetic data; `None` follows `seed`.
    pub toy_seed: Option<u64>,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

/// Every recognized key, in canonical order.
pub const KEYS: &[&str] = &[
    "seed",
    "data.source",
    "data.root",
    "data.image_size",
    "data.eager",
    "toy.num_locations",
    "toy.eval_locations",
    "toy.distractors",
    "toy.uav_per_location",
    "toy.view_shift_strength",
    "toy.uav_rotation_jitter_deg",
    "toy.uav_shift_jitter",
    "toy.pattern_contrast",
    "toy.noise_std",
    "toy.seed",
    "model.backbone",
    "model.d_embed",
    "model.tiny_widths",
    "model.remove_final_downsample",
    "model.refine_depth",
    "model.dropout",
    "model.pretrained",
    "disc.widths",
    "disc.pooling",
    "disc.kernel",
    "schedule.variant",
    "schedule.alpha_init",
    "schedule.alpha_step",
    "schedule.alpha_period_epochs",
    "schedule.max_alpha",
    "schedule.lr_decay_factor",
    "schedule.lr_decay_epochs",
    "schedule.no_restart_decay_epochs",
    "schedule.discriminator_follows_schedule",
    "lr.backbone",
    "lr.encoder_rest",
    "lr.classifier",
    "lr.discriminator",
    "train.epochs",
    "train.batch_size",
    "train.steps_per_epoch",
    "train.momentum",
    "train.weight_decay",
    "train.adam_beta1",
    "train.adam_beta2",
    "train.adam_eps",
    "train.same_batch",
    "train.use_discriminator",
    "train.hflip",
    "train.checkpoint_every",
    "eval.protocols",
    "eval.top_k",
];

pub const PRESETS: [&str; 3] = ["toy", "full256", "full384"];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for {key}"))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.is_empty() || value == "auto" {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_opt<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    match value {
        "" | "none" | "auto" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

fn join_list<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn opt_text<T: ToString>(v: &Option<T>, none: &str) -> String {
    v.as_ref().map_or(none.to_string(), ToString::to_string)
}

impl Config {
    /// Synthetic data, tiny backbone, schedule epochs divided by ten.
    pub fn toy() -> Self {
        Self {
            preset: "toy".into(),
            seed: 1,
            data: DataConfig { source: DataSource::Toy, root: None, image_size: 32, eager: true },
            toy: ToyConfig::default(),
            toy_seed: None,
            model: ModelConfig {
                encoder: EncoderConfig::toy(),
                dropout: 0.5,
                discriminator: DiscriminatorConfig::default(),
                pretrained: None,
            },
            schedule: ScheduleConfig::compressed(),
            train: TrainConfig { epochs: 42, batch_size: 16, ..TrainConfig::default() },
            eval: EvalConfig { protocols: Protocol::ALL.to_vec(), top_k: 10 },
        }
    }

    /// University-1652 with the residual backbone at `image_size`.
    pub fn full(image_size: usize) -> Self {
        Self {
            preset: format!("full{image_size}"),
            seed: 1,
            data: DataConfig { source: DataSource::University1652, root: None, image_size, eager: false },
            toy: ToyConfig::default(),
            toy_seed: None,
            model: ModelConfig {
                encoder: EncoderConfig::full(image_size),
                dropout: 0.5,
                discriminator: DiscriminatorConfig::default(),
                pretrained: None,
            },
            schedule: ScheduleConfig::default(),
            train: TrainConfig { epochs: 560, batch_size: 16, checkpoint_every: 20, ..TrainConfig::default() },
            eval: EvalConfig { protocols: Protocol::ALL.to_vec(), top_k: 10 },
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "full256" => Ok(Self::full(256)),
            "full384" => Ok(Self::full(384)),
            _ => Err(Error::Config(format!("unknown preset {name:?} (expected one of {PRESETS:?})"))),
        }
    }

    /// Apply one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let s = &mut self.schedule;
        let t = &mut self.train;
        let m = &mut self.model;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "data.source" => {
                self.data.source = match v {
                    "toy" => DataSource::Toy,
                    "university1652" => DataSource::University1652,
                    _ => return Err(Error::Config(format!("invalid data.source {v:?} (toy or university1652)"))),
                }
            }
            "data.root" => self.data.root = parse_opt::<String>(key, v)?.map(PathBuf::from),
            "data.image_size" => self.data.image_size = parse(key, v)?,
            "data.eager" => self.data.eager = parse_bool(key, v)?,
            "toy.num_locations" => self.toy.num_locations = parse(key, v)?,
            "toy.eval_locations" => self.toy.eval_locations = parse(key, v)?,
            "toy.distractors" => self.toy.distractors = parse(key, v)?,
            "toy.uav_per_location" => self.toy.uav_per_location = parse(key, v)?,
            "toy.view_shift_strength" => self.toy.view_shift_strength = parse(key, v)?,
            "toy.uav_rotation_jitter_deg" => self.toy.uav_rotation_jitter_deg = parse(key, v)?,
            "toy.uav_shift_jitter" => self.toy.uav_shift_jitter = parse(key, v)?,
            "toy.pattern_contrast" => self.toy.pattern_contrast = parse(key, v)?,
            "toy.noise_std" => self.toy.noise_std = parse(key, v)?,
            "toy.seed" => self.toy_seed = parse_opt(key, v)?,
            "model.backbone" => {
                m.encoder.backbone = match v {
                    "tiny" => BackboneKind::TinyCnn,
                    "resnet50" => BackboneKind::FullResidual50,
                    _ => return Err(Error::Config(format!("invalid model.backbone {v:?} (tiny or resnet50)"))),
                }
            }
            "model.d_embed" => m.encoder.d_embed = parse(key, v)?,
            "model.tiny_widths" => m.encoder.tiny_widths = parse_list(key, v)?,
            "model.remove_final_downsample" => m.encoder.remove_final_downsample = parse_bool(key, v)?,
            "model.refine_depth" => m.encoder.refine_depth = parse(key, v)?,
            "model.dropout" => m.dropout = parse(key, v)?,
            "model.pretrained" => m.pretrained = parse_opt::<String>(key, v)?.map(PathBuf::from),
            "disc.widths" => m.discriminator.widths = parse_list(key, v)?,
            "disc.pooling" => {
                m.discriminator.pooling = match v {
                    "strided" => Pooling::StridedConv,
                    "max" => Pooling::MaxPool,
                    "avg" => Pooling::AvgPool,
                    _ => return Err(Error::Config(format!("invalid disc.pooling {v:?} (strided, max or avg)"))),
                }
            }
            "disc.kernel" => m.discriminator.kernel = parse(key, v)?,
            "schedule.variant" => s.variant = v.parse()?,
            "schedule.alpha_init" => s.alpha_init = parse(key, v)?,
            "schedule.alpha_step" => s.alpha_step = parse(key, v)?,
            "schedule.alpha_period_epochs" => s.alpha_period_epochs = parse(key, v)?,
            "schedule.max_alpha" => s.max_alpha = parse_opt(key, v)?,
            "schedule.lr_decay_factor" => s.lr_decay_factor = parse(key, v)?,
            "schedule.lr_decay_epochs" => s.lr_decay_epochs_within_cycle = parse_list(key, v)?,
            "schedule.no_restart_decay_epochs" => s.no_restart_decay_epochs = parse_list(key, v)?,
            "schedule.discriminator_follows_schedule" => s.discriminator_follows_schedule = parse_bool(key, v)?,
            "lr.backbone" => s.base_lrs[ParamGroup::Backbone.index()] = parse(key, v)?,
            "lr.encoder_rest" => s.base_lrs[ParamGroup::EncoderRest.index()] = parse(key, v)?,
            "lr.classifier" => s.base_lrs[ParamGroup::Classifier.index()] = parse(key, v)?,
            "lr.discriminator" => s.base_lrs[ParamGroup::Discriminator.index()] = parse(key, v)?,
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.steps_per_epoch" => t.steps_per_epoch = parse_opt(key, v)?,
            "train.momentum" => t.momentum = parse(key, v)?,
            "train.weight_decay" => t.weight_decay = parse(key, v)?,
            "train.adam_beta1" => t.adam_beta1 = parse(key, v)?,
            "train.adam_beta2" => t.adam_beta2 = parse(key, v)?,
            "train.adam_eps" => t.adam_eps = parse(key, v)?,
            "train.same_batch" => t.same_batch = parse_bool(key, v)?,
            "train.use_discriminator" => t.use_discriminator = parse_bool(key, v)?,
            "train.hflip" => t.hflip = parse_bool(key, v)?,
            "train.checkpoint_every" => t.checkpoint_every = parse(key, v)?,
            "eval.protocols" => {
                self.eval.protocols = v.split(',').map(|p| p.trim().parse()).collect::<Result<_>>()?;
            }
            "eval.top_k" => self.eval.top_k = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        let s = &self.schedule;
        let t = &self.train;
        let m = &self.model;
        let lr = |g: ParamGroup| s.base_lr(g).to_string();
        Ok(match key {
            "seed" => self.seed.to_string(),
            "data.source" => match self.data.source {
                DataSource::Toy => "toy".into(),
                DataSource::University1652 => "university1652".into(),
            },
            "data.root" => opt_text(&self.data.root.as_ref().map(|p| p.display().to_string()), "none"),
            "data.image_size" => self.data.image_size.to_string(),
            "data.eager" => self.data.eager.to_string(),
            "toy.num_locations" => self.toy.num_locations.to_string(),
            "toy.eval_locations" => self.toy.eval_locations.to_string(),
            "toy.distractors" => self.toy.distractors.to_string(),
            "toy.uav_per_location" => self.toy.uav_per_location.to_string(),
            "toy.view_shift_strength" => self.toy.view_shift_strength.to_string(),
            "toy.uav_rotation_jitter_deg" => self.toy.uav_rotation_jitter_deg.to_string(),
            "toy.uav_shift_jitter" => self.toy.uav_shift_jitter.to_string(),
            "toy.pattern_contrast" => self.toy.pattern_contrast.to_string(),
            "toy.noise_std" => self.toy.noise_std.to_string(),
            "toy.seed" => opt_text(&self.toy_seed, "auto"),
            "model.backbone" => match m.encoder.backbone {
                BackboneKind::TinyCnn => "tiny".into(),
                BackboneKind::FullResidual50 => "resnet50".into(),
            },
            "model.d_embed" => m.encoder.d_embed.to_string(),
            "model.tiny_widths" => join_list(&m.encoder.tiny_widths),
            "model.remove_final_downsample" => m.encoder.remove_final_downsample.to_string(),
            "model.refine_depth" => m.encoder.refine_depth.to_string(),
            "model.dropout" => m.dropout.to_string(),
            "model.pretrained" => opt_text(&m.pretrained.as_ref().map(|p| p.display().to_string()), "none"),
            "disc.widths" => {
                if m.discriminator.widths.is_empty() {
                    "auto".into()
                } else {
                    join_list(&m.discriminator.widths)
                }
            }
            "disc.pooling" => match m.discriminator.pooling {
                Pooling::StridedConv => "strided".into(),
                Pooling::MaxPool => "max".into(),
                Pooling::AvgPool => "avg".into(),
            },
            "disc.kernel" => m.discriminator.kernel.to_string(),
            "schedule.variant" => s.variant.to_string(),
            "schedule.alpha_init" => s.alpha_init.to_string(),
            "schedule.alpha_step" => s.alpha_step.to_string(),
            "schedule.alpha_period_epochs" => s.alpha_period_epochs.to_string(),
            "schedule.max_alpha" => opt_text(&s.max_alpha, "none"),
            "schedule.lr_decay_factor" => s.lr_decay_factor.to_string(),
            "schedule.lr_decay_epochs" => join_list(&s.lr_decay_epochs_within_cycle),
            "schedule.no_restart_decay_epochs" => join_list(&s.no_restart_decay_epochs),
            "schedule.discriminator_follows_schedule" => s.discriminator_follows_schedule.to_string(),
            "lr.backbone" => lr(ParamGroup::Backbone),
            "lr.encoder_rest" => lr(ParamGroup::EncoderRest),
            "lr.classifier" => lr(ParamGroup::Classifier),
            "lr.discriminator" => lr(ParamGroup::Discriminator),
            "train.epochs" => t.epochs.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.steps_per_epoch" => opt_text(&t.steps_per_epoch, "auto"),
            "train.momentum" => t.momentum.to_string(),
            "train.weight_decay" => t.weight_decay.to_string(),
            "train.adam_beta1" => t.adam_beta1.to_string(),
            "train.adam_beta2" => t.adam_beta2.to_string(),
            "train.adam_eps" => t.adam_eps.to_string(),
            "train.same_batch" => t.same_batch.to_string(),
            "train.use_discriminator" => t.use_discriminator.to_string(),
            "train.hflip" => t.hflip.to_string(),
            "train.checkpoint_every" => t.checkpoint_every.to_string(),
            "eval.protocols" => join_list(&self.eval.protocols),
            "eval.top_k" => self.eval.top_k.to_string(),
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        })
    }

    /// Apply a `key=value` override.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (k, v) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {spec:?} is not of the form key=value")))?;
        self.set(k.trim(), v)
    }

    /// Parse config text: `#` comments, blank lines, `key = value` lines.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut preset = "toy".to_string();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config line {}: expected key = value", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k == "preset" {
                preset = v.to_string();
            } else {
                entries.push((k.to_string(), v.to_string()));
            }
        }
        let mut cfg = Self::preset(&preset)?;
        for (k, v) in entries {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Every key with its current value, in canonical order.
    pub fn to_text(&self) -> String {
        let mut out = format!("preset = {}\n", self.preset);
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("every listed key is readable"));
        }
        out
    }

    /// Hex SHA-256 of [`Config::to_text`].
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_text().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Encoder settings with the input size taken from `data.image_size`.
    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig { image_size: self.data.image_size, ..self.model.encoder.clone() }
    }

    /// Synthetic-data settings with the image size and seed resolved.
    pub fn toy_config(&self) -> ToyConfig {
        ToyConfig { image_size: self.data.image_size, seed: self.toy_seed.unwrap_or(self.seed), ..self.toy.clone() }
    }

    /// Copy with derived fields filled in; what training and checkpoints use.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.model.encoder = self.encoder_config();
        c.toy = self.toy_config();
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder_config().validate()?;
        self.schedule.validate()?;
        self.train.validate()?;
        if self.data.source == DataSource::Toy {
            self.toy_config().validate()?;
        }
        if !(0.0..1.0).contains(&self.model.dropout) {
            return Err(Error::Config("model.dropout must lie in [0, 1)".into()));
        }
        if self.eval.protocols.is_empty() {
            return Err(Error::Config("eval.protocols must name at least one protocol".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_for_every_preset() {
        for p in PRESETS {
            let cfg = Config::preset(p).unwrap();
            let back = Config::from_text(&cfg.to_text()).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.hash(), cfg.hash());
        }
    }

    #[test]
    fn every_key_reads_and_writes() {
        let mut cfg = Config::toy();
        for key in KEYS {
            let v = cfg.get(key).unwrap();
            cfg.set(key, &v).unwrap();
        }
        assert_eq!(cfg, Config::toy());
    }

    #[test]
    fn unknown_key_is_fatal() {
        assert!(matches!(Config::from_text("train.epoch = 3"), Err(Error::Config(_))));
        assert!(Config::toy().apply_override("nope=1").is_err());
        assert!(Config::toy().apply_override("train.epochs").is_err());
    }

    #[test]
    fn overrides_change_the_hash() {
        let mut cfg = Config::toy();
        let h = cfg.hash();
        cfg.apply_override("schedule.variant=NO_RESTART").unwrap();
        assert_eq!(cfg.schedule.variant, crate::training::Variant::NoRestart);
        assert_ne!(cfg.hash(), h);
    }

    #[test]
    fn partial_file_over_preset() {
        let cfg = Config::from_text("# comment\npreset = full384\ntrain.epochs = 3 # short\n\nlr.backbone=0.002\n").unwrap();
        assert_eq!(cfg.data.image_size, 384);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.schedule.base_lr(ParamGroup::Backbone), 0.002);
        assert!(Config::from_text("preset = huge").is_err());
    }

    #[test]
    fn toy_seed_follows_seed_unless_set() {
        let mut cfg = Config::toy();
        cfg.seed = 9;
        assert_eq!(cfg.toy_config().seed, 9);
        cfg.set("toy.seed", "4").unwrap();
        assert_eq!(cfg.toy_config().seed, 4);
    }

    #[test]
    fn presets_validate() {
        for p in PRESETS {
            Config::preset(p).unwrap().validate().unwrap();
        }
        let mut cfg = Config::toy();
        cfg.set("model.dropout", "1.0").unwrap();
        assert!(cfg.validate().is_err());
    }
}
