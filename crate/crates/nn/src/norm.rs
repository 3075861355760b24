use ndarray::{Array2, Array3, Array4, ArrayD, IxDyn};

use crate::param::{join, Module, Param};
use crate::Mode;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel normalization state shared by the 1-D and 2-D variants.
/// Tensors are viewed as `(batch, channels, positions)`.
#[derive(Debug, Clone)]
struct NormCore {
    gamma: Param,
    beta: Param,
    running_mean: Param,
    running_var: Param,
    channels: usize,
    cache: Option<NormCache>,
}

#[derive(Debug, Clone)]
struct NormCache {
    xhat: Array3<f64>,
    inv_std: Vec<f64>,
    train: bool,
}

impl NormCore {
    fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(ArrayD::ones(IxDyn(&[channels]))),
            beta: Param::zeros(&[channels]),
            running_mean: Param::buffer(ArrayD::zeros(IxDyn(&[channels]))),
            running_var: Param::buffer(ArrayD::ones(IxDyn(&[channels]))),
            channels,
            cache: None,
        }
    }

    fn eval_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let mean = self.running_mean.value.iter().copied().collect();
        let inv = self.running_var.value.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        (mean, inv)
    }

    fn batch_stats(x: &Array3<f64>) -> (Vec<f64>, Vec<f64>) {
        let (n, c, s) = x.dim();
        let m = (n * s) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ci in 0..c {
            let mut acc = 0.0;
            for b in 0..n {
                for p in 0..s {
                    acc += x[[b, ci, p]];
                }
            }
            let mu = acc / m;
            let mut sq = 0.0;
            for b in 0..n {
                for p in 0..s {
                    let d = x[[b, ci, p]] - mu;
                    sq += d * d;
                }
            }
            mean[ci] = mu;
            var[ci] = sq / m;
        }
        (mean, var)
    }

    fn normalize(&self, x: &Array3<f64>, mean: &[f64], inv_std: &[f64]) -> (Array3<f64>, Array3<f64>) {
        let mut xhat = x.clone();
        for ((_, ci, _), v) in xhat.indexed_iter_mut() {
            *v = (*v - mean[ci]) * inv_std[ci];
        }
        let mut y = xhat.clone();
        for ((_, ci, _), v) in y.indexed_iter_mut() {
            *v = *v * self.gamma.value[[ci]] + self.beta.value[[ci]];
        }
        (xhat, y)
    }

    fn infer(&self, x: &Array3<f64>) -> Array3<f64> {
        assert_eq!(x.dim().1, self.channels, "batch norm channel mismatch");
        let (mean, inv) = self.eval_stats();
        self.normalize(x, &mean, &inv).1
    }

    fn forward(&mut self, x: &Array3<f64>, mode: Mode) -> Array3<f64> {
        assert_eq!(x.dim().1, self.channels, "batch norm channel mismatch");
        let (n, _, s) = x.dim();
        let (mean, inv) = if mode.is_train() {
            let m = n * s;
            assert!(m > 1, "batch norm in training mode needs more than one value per channel");
            let (mean, var) = Self::batch_stats(x);
            let unbiased = m as f64 / (m as f64 - 1.0);
            for ci in 0..self.channels {
                let rm = &mut self.running_mean.value[[ci]];
                *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * mean[ci];
                let rv = &mut self.running_var.value[[ci]];
                *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * var[ci] * unbiased;
            }
            let inv = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            (mean, inv)
        } else {
            self.eval_stats()
        };
        let (xhat, y) = self.normalize(x, &mean, &inv);
        self.cache = Some(NormCache { xhat, inv_std: inv, train: mode.is_train() });
        y
    }

    fn backward(&mut self, dy: &Array3<f64>) -> Array3<f64> {
        let cache = self.cache.take().expect("batch norm backward without forward");
        let (n, c, s) = dy.dim();
        let m = (n * s) as f64;
        let mut dx = Array3::zeros((n, c, s));
        for ci in 0..c {
            let g = self.gamma.value[[ci]];
            let mut sum_dy = 0.0;
            let mut sum_dy_xhat = 0.0;
            for b in 0..n {
                for p in 0..s {
                    let d = dy[[b, ci, p]];
                    sum_dy += d;
                    sum_dy_xhat += d * cache.xhat[[b, ci, p]];
                }
            }
            self.gamma.grad[[ci]] += sum_dy_xhat;
            self.beta.grad[[ci]] += sum_dy;
            let inv = cache.inv_std[ci];
            for b in 0..n {
                for p in 0..s {
                    dx[[b, ci, p]] = if cache.train {
                        g * inv / m * (m * dy[[b, ci, p]] - sum_dy - cache.xhat[[b, ci, p]] * sum_dy_xhat)
                    } else {
                        g * inv * dy[[b, ci, p]]
                    };
                }
            }
        }
        dx
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.gamma);
        f(&join(prefix, "bias"), &mut self.beta);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

fn to3(x: &Array4<f64>) -> Array3<f64> {
    let (n, c, h, w) = x.dim();
    x.as_standard_layout().into_owned().into_shape_with_order((n, c, h * w)).unwrap()
}

/// Batch normalization over `(N, C, H, W)` feature maps.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    core: NormCore,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self { core: NormCore::new(channels) }
    }

    pub fn infer(&self, x: &Array4<f64>) -> Array4<f64> {
        self.core.infer(&to3(x)).into_shape_with_order(x.dim()).unwrap()
    }

    pub fn forward(&mut self, x: &Array4<f64>, mode: Mode) -> Array4<f64> {
        self.core.forward(&to3(x), mode).into_shape_with_order(x.dim()).unwrap()
    }

    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        self.core.backward(&to3(dy)).into_shape_with_order(dy.dim()).unwrap()
    }
}

impl Module for BatchNorm2d {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.core.visit(prefix, f);
    }
}

/// Batch normalization over `(N, F)` feature vectors.
#[derive(Debug, Clone)]
pub struct BatchNorm1d {
    core: NormCore,
}

impl BatchNorm1d {
    pub fn new(features: usize) -> Self {
        Self { core: NormCore::new(features) }
    }

    fn to3(x: &Array2<f64>) -> Array3<f64> {
        let (n, f) = x.dim();
        x.as_standard_layout().into_owned().into_shape_with_order((n, f, 1)).unwrap()
    }

    pub fn infer(&self, x: &Array2<f64>) -> Array2<f64> {
        self.core.infer(&Self::to3(x)).into_shape_with_order(x.dim()).unwrap()
    }

    pub fn forward(&mut self, x: &Array2<f64>, mode: Mode) -> Array2<f64> {
        self.core.forward(&Self::to3(x), mode).into_shape_with_order(x.dim()).unwrap()
    }

    pub fn backward(&mut self, dy: &Array2<f64>) -> Array2<f64> {
        self.core.backward(&Self::to3(dy)).into_shape_with_order(dy.dim()).unwrap()
    }
}

impl Module for BatchNorm1d {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.core.visit(prefix, f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn training_output_is_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array4::from_shape_fn((4, 3, 5, 5), |(_, c, _, _)| rng.random_range(-1.0..1.0) * 3.0 + c as f64);
        let mut bn = BatchNorm2d::new(3);
        let y = bn.forward(&x, Mode::Train);
        for c in 0..3 {
            let vals: Vec<f64> = y.slice(ndarray::s![.., c, .., ..]).iter().copied().collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
        // running mean moved 10% toward the channel means
        assert!((bn.core.running_mean.value[[2]] - 0.2).abs() < 0.05);
    }

    fn check_grad(mode: Mode) {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array2::from_shape_fn((5, 3), |_| rng.random_range(-2.0..2.0));
        let dy = Array2::from_shape_fn((5, 3), |_| rng.random_range(-1.0..1.0));
        let mut bn = BatchNorm1d::new(3);
        bn.core.gamma.value[[1]] = 1.7;
        bn.core.running_mean.value[[0]] = 0.3;
        bn.core.running_var.value[[2]] = 2.5;
        let base = bn.clone();
        bn.forward(&x, mode);
        let dx = bn.backward(&dy);
        let loss = |x: &Array2<f64>| {
            let mut b = base.clone();
            (b.forward(x, mode) * &dy).sum()
        };
        let eps = 1e-6;
        for i in 0..5 {
            for j in 0..3 {
                let mut xp = x.clone();
                xp[[i, j]] += eps;
                let mut xm = x.clone();
                xm[[i, j]] -= eps;
                let fd = (loss(&xp) - loss(&xm)) / (2.0 * eps);
                assert!((fd - dx[[i, j]]).abs() < 1e-6, "{mode:?} ({i},{j}): {fd} vs {}", dx[[i, j]]);
            }
        }
    }

    #[test]
    fn train_mode_gradient_matches_finite_differences() {
        check_grad(Mode::Train);
    }

    #[test]
    fn eval_mode_gradient_matches_finite_differences() {
        check_grad(Mode::Eval);
    }

    #[test]
    fn eval_mode_is_deterministic_and_uses_running_stats() {
        let mut bn = BatchNorm1d::new(2);
        bn.core.running_mean.value[[0]] = 1.0;
        bn.core.running_var.value[[0]] = 4.0 - BN_EPS;
        let x = Array2::from_shape_vec((1, 2), vec![5.0, 0.5]).unwrap();
        let y = bn.infer(&x);
        assert!((y[[0, 0]] - 2.0).abs() < 1e-12);
        assert_eq!(y, bn.infer(&x));
    }
}
