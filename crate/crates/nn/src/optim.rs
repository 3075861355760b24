//! SGD with momentum and Adam, with state keyed by parameter path so it can
//! be checkpointed alongside the weights.

use std::collections::BTreeMap;

use ndarray::{ArrayD, Zip};

use crate::param::{Module, Param};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { momentum: 0.9, weight_decay: 5e-4 }
    }
}

/// Heavy-ball SGD: `v <- mu v + (g + wd w)`, `w <- w - lr v`.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    pub config: SgdConfig,
    pub velocity: BTreeMap<String, ArrayD<f64>>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Self { config, velocity: BTreeMap::new() }
    }

    pub fn step(&mut self, module: &mut dyn Module, prefix: &str, lr: f64) {
        let cfg = self.config;
        module.visit_params(prefix, &mut |name, p| {
            if !p.is_trainable() {
                return;
            }
            let v = self
                .velocity
                .entry(name.to_string())
                .or_insert_with(|| ArrayD::zeros(p.value.raw_dim()));
            sgd_update(p, v, cfg, lr);
        });
    }
}

fn sgd_update(p: &mut Param, v: &mut ArrayD<f64>, cfg: SgdConfig, lr: f64) {
    Zip::from(&mut p.value).and(&p.grad).and(v).for_each(|w, &g, v| {
        let g = g + cfg.weight_decay * *w;
        *v = cfg.momentum * *v + g;
        *w -= lr * *v;
    });
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Adam {
    pub config: AdamConfig,
    pub steps: u64,
    pub first_moment: BTreeMap<String, ArrayD<f64>>,
    pub second_moment: BTreeMap<String, ArrayD<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, steps: 0, first_moment: BTreeMap::new(), second_moment: BTreeMap::new() }
    }

    pub fn step(&mut self, module: &mut dyn Module, prefix: &str, lr: f64) {
        self.steps += 1;
        let cfg = self.config;
        let bc1 = 1.0 - cfg.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.steps as i32);
        module.visit_params(prefix, &mut |name, p| {
            if !p.is_trainable() {
                return;
            }
            let m = self
                .first_moment
                .entry(name.to_string())
                .or_insert_with(|| ArrayD::zeros(p.value.raw_dim()));
            let v = self
                .second_moment
                .entry(name.to_string())
                .or_insert_with(|| ArrayD::zeros(p.value.raw_dim()));
            Zip::from(&mut p.value).and(&p.grad).and(m).and(v).for_each(|w, &g, m, v| {
                let g = g + cfg.weight_decay * *w;
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w -= lr * mhat / (vhat.sqrt() + cfg.eps);
            });
        });
    }
}
