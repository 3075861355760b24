//! Adversarial-weight and learning-rate schedules.
//!
//! The adversarial weight grows by a fixed step every period. The learning
//! rate decays by a constant factor at fixed epochs inside each period and
//! restarts at the base rate whenever the weight grows (warm restart). Two
//! ablation variants drop the weight growth or the restart.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Growing weight with warm restarts.
    Pvda,
    /// Constant weight with warm restarts.
    ConstantAlpha,
    /// Growing weight, learning rate decays at absolute epochs, no restart.
    NoRestart,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Pvda, Variant::ConstantAlpha, Variant::NoRestart];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Pvda => "PVDA",
            Variant::ConstantAlpha => "CONSTANT_ALPHA",
            Variant::NoRestart => "NO_RESTART",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "PVDA" => Ok(Variant::Pvda),
            "CONSTANT_ALPHA" => Ok(Variant::ConstantAlpha),
            "NO_RESTART" => Ok(Variant::NoRestart),
            _ => Err(Error::Config(format!("unknown schedule variant {s:?}"))),
        }
    }
}

/// Parameter groups with their own learning rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamGroup {
    Backbone,
    EncoderRest,
    Classifier,
    Discriminator,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] =
        [ParamGroup::Backbone, ParamGroup::EncoderRest, ParamGroup::Classifier, ParamGroup::Discriminator];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::EncoderRest => "encoder_rest",
            ParamGroup::Classifier => "classifier",
            ParamGroup::Discriminator => "discriminator",
        }
    }
}

impl FromStr for ParamGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ParamGroup::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown parameter group {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub alpha_init: f64,
    pub alpha_step: f64,
    pub alpha_period_epochs: usize,
    /// Optional ceiling on the adversarial weight.
    pub max_alpha: Option<f64>,
    pub lr_decay_factor: f64,
    /// Decay points measured from the start of each period.
    pub lr_decay_epochs_within_cycle: Vec<usize>,
    /// Absolute decay points of the no-restart variant.
    pub no_restart_decay_epochs: Vec<usize>,
    /// Base rates indexed by [`ParamGroup::index`].
    pub base_lrs: [f64; 4],
    pub variant: Variant,
    /// Whether the discriminator rate follows the same decay/restart policy.
    pub discriminator_follows_schedule: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            alpha_init: 0.9,
            alpha_step: 0.1,
            alpha_period_epochs: 140,
            max_alpha: None,
            lr_decay_factor: 0.8,
            lr_decay_epochs_within_cycle: vec![60, 120],
            no_restart_decay_epochs: vec![140, 280, 420],
            base_lrs: [0.001, 0.01, 0.01, 0.002],
            variant: Variant::Pvda,
            discriminator_follows_schedule: true,
        }
    }
}

impl ScheduleConfig {
    /// Every epoch constant divided by ten.
    pub fn compressed() -> Self {
        Self {
            alpha_period_epochs: 14,
            lr_decay_epochs_within_cycle: vec![6, 12],
            no_restart_decay_epochs: vec![14, 28, 42],
            ..Self::default()
        }
    }

    pub fn base_lr(&self, group: ParamGroup) -> f64 {
        self.base_lrs[group.index()]
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha_period_epochs == 0 {
            return Err(Error::Config("schedule.alpha_period_epochs must be positive".into()));
        }
        let max_decay = self.lr_decay_epochs_within_cycle.iter().copied().max().unwrap_or(0);
        if self.alpha_period_epochs <= max_decay {
            return Err(Error::Config(format!(
                "schedule.alpha_period_epochs ({}) must exceed every in-cycle decay epoch ({max_decay})",
                self.alpha_period_epochs
            )));
        }
        if self.base_lrs.iter().any(|&lr| !(lr > 0.0) || !lr.is_finite()) {
            return Err(Error::Config("all base learning rates must be positive".into()));
        }
        if !(self.lr_decay_factor > 0.0) {
            return Err(Error::Config("schedule.lr_decay_factor must be positive".into()));
        }
        if !(self.alpha_init >= 0.0) || !(self.alpha_step >= 0.0) {
            return Err(Error::Config("adversarial weight and its step must be >= 0".into()));
        }
        Ok(())
    }
}

/// Adversarial weight at `epoch`.
pub fn alpha_at(epoch: usize, cfg: &ScheduleConfig) -> f64 {
    let alpha = match cfg.variant {
        Variant::ConstantAlpha => cfg.alpha_init,
        Variant::Pvda | Variant::NoRestart => {
            cfg.alpha_init + cfg.alpha_step * (epoch / cfg.alpha_period_epochs) as f64
        }
    };
    match cfg.max_alpha {
        Some(cap) => alpha.min(cap),
        None => alpha,
    }
}

/// Learning rate of `group` at `epoch`.
pub fn lr_at(epoch: usize, group: ParamGroup, cfg: &ScheduleConfig) -> f64 {
    let base = cfg.base_lr(group);
    if group == ParamGroup::Discriminator && !cfg.discriminator_follows_schedule {
        return base;
    }
    let decays = match cfg.variant {
        Variant::Pvda | Variant::ConstantAlpha => {
            let e = epoch % cfg.alpha_period_epochs;
            cfg.lr_decay_epochs_within_cycle.iter().filter(|&&d| e >= d).count()
        }
        Variant::NoRestart => cfg.no_restart_decay_epochs.iter().filter(|&&d| epoch >= d).count(),
    };
    // repeated multiplication, one factor per passed decay point
    (0..decays).fold(base, |lr, _| lr * cfg.lr_decay_factor)
}

/// `lr_at` addressed by group name.
pub fn lr_at_named(epoch: usize, group: &str, cfg: &ScheduleConfig) -> Result<f64> {
    Ok(lr_at(epoch, group.parse()?, cfg))
}
