//! Versioned checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header, then every tensor as little-endian `f64` in header order. Tensor
//! names are `model/<param path>`, `sgd/<param path>`, `adam_m/<param path>`
//! and `adam_v/<param path>`. Scalars that must survive bit-exactly (rates,
//! rng position) are stored as integers or bit patterns.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use skyalign_nn::{Adam, Module, Sgd};

use crate::config::Config;
use crate::error::{Error, Result};

use super::{Incident, Model, TrainState};

pub const MAGIC: &[u8; 8] = b"SKYALIGN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        let seed = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        Self { seed, stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = || Error::Checkpoint("corrupt rng state".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub crate_version: String,
    pub epoch: usize,
    pub global_step: u64,
    pub num_locations: usize,
    pub adam_steps: u64,
    pub rng: RngState,
    /// `f64::to_bits` of the incident learning-rate multipliers.
    pub lr_scale_bits: [u64; 4],
    pub lr_halved: [bool; 4],
    pub incidents: Vec<Incident>,
    pub init: String,
    /// Canonical text of the resolved configuration.
    pub config: String,
    pub config_hash: String,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, ArrayD<f64>>,
}

impl Checkpoint {
    pub fn config(&self) -> Result<Config> {
        Config::from_text(&self.meta.config)
    }

    /// Tensors under `prefix/`, with the prefix stripped.
    pub fn group(&self, prefix: &str) -> BTreeMap<String, ArrayD<f64>> {
        let p = format!("{prefix}/");
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&p).map(|k| (k.to_string(), v.clone())))
            .collect()
    }
}

pub fn save(path: &Path, state: &mut TrainState, config: &Config) -> Result<()> {
    let mut tensors: Vec<(String, ArrayD<f64>)> = Vec::new();
    state.model.visit_params("", &mut |name, p| tensors.push((format!("model/{name}"), p.value.clone())));
    tensors.extend(state.sgd.velocity.iter().map(|(k, v)| (format!("sgd/{k}"), v.clone())));
    tensors.extend(state.adam.first_moment.iter().map(|(k, v)| (format!("adam_m/{k}"), v.clone())));
    tensors.extend(state.adam.second_moment.iter().map(|(k, v)| (format!("adam_v/{k}"), v.clone())));

    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        epoch: state.epoch,
        global_step: state.global_step,
        num_locations: state.num_locations,
        adam_steps: state.adam.steps,
        rng: RngState::capture(&state.rng),
        lr_scale_bits: state.lr_scale.map(f64::to_bits),
        lr_halved: state.lr_halved,
        incidents: state.incidents.clone(),
        init: state.init.clone(),
        config: config.to_text(),
        config_hash: config.hash(),
        tensors: tensors.iter().map(|(n, t)| TensorEntry { name: n.clone(), shape: t.shape().to_vec() }).collect(),
    };
    let header = serde_json::to_vec(&meta)?;
    let mut buf = Vec::with_capacity(header.len() + 20);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for (_, t) in &tensors {
        for v in t.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // write to a sibling file first so an interrupted save never leaves a torn checkpoint
    let tmp = path.with_extension("ckpt.tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn parse(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported format version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = &bytes[20..];
    if body.len() < hlen {
        return Err(bad("truncated header"));
    }
    let meta: CheckpointMeta = serde_json::from_slice(&body[..hlen])?;
    let mut data = &body[hlen..];
    let mut tensors = BTreeMap::new();
    for entry in &meta.tensors {
        let n: usize = entry.shape.iter().product();
        if data.len() < 8 * n {
            return Err(bad(&format!("truncated tensor {}", entry.name)));
        }
        let values: Vec<f64> =
            data[..8 * n].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        data = &data[8 * n..];
        let t = ArrayD::from_shape_vec(IxDyn(&entry.shape), values).map_err(|e| bad(&e.to_string()))?;
        tensors.insert(entry.name.clone(), t);
    }
    if !data.is_empty() {
        return Err(bad("trailing bytes after last tensor"));
    }
    Ok(Checkpoint { meta, tensors })
}

/// Copy `tensors` (keyed by param path under `prefix`) into `module`. Every
/// parameter must be present with a matching shape.
pub fn load_params(module: &mut dyn Module, prefix: &str, tensors: &BTreeMap<String, ArrayD<f64>>) -> Result<()> {
    let mut err = None;
    let mut used = 0usize;
    module.visit_params(prefix, &mut |name, p| {
        if err.is_some() {
            return;
        }
        match tensors.get(name) {
            None => err = Some(Error::Checkpoint(format!("missing tensor {name}"))),
            Some(t) if t.shape() != p.value.shape() => {
                err = Some(Error::Shape(format!(
                    "tensor {name}: checkpoint shape {:?}, model shape {:?}",
                    t.shape(),
                    p.value.shape()
                )))
            }
            Some(t) => {
                p.value.assign(t);
                used += 1;
            }
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    let expected = tensors.keys().filter(|k| prefix.is_empty() || k.starts_with(prefix)).count();
    if used != expected {
        return Err(Error::Checkpoint(format!("{} unexpected tensors in checkpoint", expected - used)));
    }
    Ok(())
}

/// Rebuild a full training state from a checkpoint. `config` shapes the
/// model; a differing stored config hash only warns.
pub fn load_state(path: &Path, config: &Config) -> Result<TrainState> {
    let ckpt = read(path)?;
    if ckpt.meta.config_hash != config.hash() {
        ::log::warn!("{}: checkpoint config hash differs from the current config", path.display());
    }
    state_from_checkpoint(&ckpt, config)
}

pub fn state_from_checkpoint(ckpt: &Checkpoint, config: &Config) -> Result<TrainState> {
    let meta = &ckpt.meta;
    // parameters come from the checkpoint, so skip any pretrained source
    let mut fresh = config.clone();
    fresh.model.pretrained = None;
    let mut state = TrainState::new(&fresh, meta.num_locations)?;
    load_params(&mut state.model, "", &ckpt.group("model"))?;
    state.sgd = Sgd::new(config.train.sgd());
    state.sgd.velocity = ckpt.group("sgd");
    state.adam = Adam::new(config.train.adam());
    state.adam.first_moment = ckpt.group("adam_m");
    state.adam.second_moment = ckpt.group("adam_v");
    state.adam.steps = meta.adam_steps;
    state.epoch = meta.epoch;
    state.global_step = meta.global_step;
    state.rng = meta.rng.restore()?;
    state.lr_scale = meta.lr_scale_bits.map(f64::from_bits);
    state.lr_halved = meta.lr_halved;
    state.incidents = meta.incidents.clone();
    state.init = meta.init.clone();
    Ok(state)
}

/// Model with parameters from a checkpoint, using the checkpoint's own config.
pub fn load_model(path: &Path) -> Result<(Model, Config, Checkpoint)> {
    let ckpt = read(path)?;
    let config = ckpt.config()?;
    let state = state_from_checkpoint(&ckpt, &config)?;
    Ok((state.model, config, ckpt))
}

/// Initialize the backbone from the `encoder.backbone` tensors of another
/// checkpoint.
pub fn load_backbone(model: &mut Model, path: &Path) -> Result<()> {
    let ckpt = read(path)?;
    let tensors: BTreeMap<String, ArrayD<f64>> = ckpt
        .group("model")
        .into_iter()
        .filter(|(k, _)| k.starts_with("encoder.backbone."))
        .collect();
    if tensors.is_empty() {
        return Err(Error::Checkpoint(format!("{} holds no backbone tensors", path.display())));
    }
    load_params(&mut model.encoder.backbone, "encoder.backbone", &tensors)
}
