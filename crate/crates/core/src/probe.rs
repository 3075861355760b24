//! Class-balanced logistic-regression probe.
//!
//! Used to measure how much view information a frozen representation still
//! carries: fit on one set of features, report balanced accuracy on another.

use ndarray::{Array1, Array2, Axis};

const RIDGE: f64 = 1e-2;
const NEWTON_ITERS: usize = 50;

#[derive(Debug, Clone)]
pub struct LinearProbe {
    mean: Array1<f64>,
    scale: Array1<f64>,
    weights: Array1<f64>,
    bias: f64,
}

impl LinearProbe {
    /// Fit by Newton's method on standardized features with an L2 penalty.
    /// Each class contributes half of the total loss weight.
    pub fn fit(features: &Array2<f64>, labels: &[bool]) -> Self {
        let (n, d) = features.dim();
        assert_eq!(n, labels.len(), "one label per row");
        let mean = features.mean_axis(Axis(0)).expect("non-empty features");
        let std = features.std_axis(Axis(0), 0.0);
        let scale = std.mapv(|s| if s > 1e-12 { 1.0 / s } else { 0.0 });
        let x = (features - &mean) * &scale;

        let pos = labels.iter().filter(|&&l| l).count().max(1) as f64;
        let neg = (n as f64 - pos).max(1.0);
        let sample_w: Vec<f64> = labels.iter().map(|&l| if l { 0.5 / pos } else { 0.5 / neg }).collect();

        // parameters: d weights followed by the bias
        let mut theta = Array1::<f64>::zeros(d + 1);
        for _ in 0..NEWTON_ITERS {
            let mut grad = Array1::<f64>::zeros(d + 1);
            let mut hess = Array2::<f64>::zeros((d + 1, d + 1));
            for i in 0..n {
                let row = x.row(i);
                let z = row.dot(&theta.slice(ndarray::s![..d])) + theta[d];
                let p = sigmoid(z);
                let y = if labels[i] { 1.0 } else { 0.0 };
                let w = sample_w[i];
                let r = w * (p - y);
                let h = w * p * (1.0 - p);
                for a in 0..=d {
                    let xa = if a < d { row[a] } else { 1.0 };
                    grad[a] += r * xa;
                    for b in 0..=a {
                        let xb = if b < d { row[b] } else { 1.0 };
                        hess[[a, b]] += h * xa * xb;
                    }
                }
            }
            for a in 0..d {
                grad[a] += RIDGE * theta[a];
                hess[[a, a]] += RIDGE;
            }
            hess[[d, d]] += 1e-9;
            for a in 0..=d {
                for b in 0..a {
                    hess[[b, a]] = hess[[a, b]];
                }
            }
            let step = solve_spd(&hess, &grad);
            theta -= &step;
            if step.iter().map(|v| v.abs()).fold(0.0, f64::max) < 1e-10 {
                break;
            }
        }
        let weights = theta.slice(ndarray::s![..d]).to_owned();
        Self { mean, scale, weights, bias: theta[d] }
    }

    pub fn predict(&self, features: &Array2<f64>) -> Vec<bool> {
        let x = (features - &self.mean) * &self.scale;
        x.outer_iter().map(|r| r.dot(&self.weights) + self.bias > 0.0).collect()
    }

    /// Mean of the per-class accuracies.
    pub fn balanced_accuracy(&self, features: &Array2<f64>, labels: &[bool]) -> f64 {
        let pred = self.predict(features);
        let mut hit = [0usize; 2];
        let mut tot = [0usize; 2];
        for (&p, &l) in pred.iter().zip(labels) {
            tot[l as usize] += 1;
            hit[l as usize] += (p == l) as usize;
        }
        let accs: Vec<f64> = (0..2).filter(|&c| tot[c] > 0).map(|c| hit[c] as f64 / tot[c] as f64).collect();
        accs.iter().sum::<f64>() / accs.len().max(1) as f64
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Cholesky solve of a symmetric positive-definite system.
fn solve_spd(a: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = b.len();
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                l[[i, i]] = s.max(1e-300).sqrt();
            } else {
                l[[i, j]] = s / l[[j, j]];
            }
        }
    }
    let mut y = Array1::<f64>::zeros(n);
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[[i, k]] * y[k];
        }
        y[i] = s / l[[i, i]];
    }
    let mut x = Array1::<f64>::zeros(n);
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[[k, i]] * x[k];
        }
        x[i] = s / l[[i, i]];
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn separates_shifted_gaussians() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 200;
        let labels: Vec<bool> = (0..n).map(|i| i % 4 == 0).collect();
        let x = Array2::from_shape_fn((n, 3), |(i, j)| {
            let shift = if labels[i] && j == 1 { 3.0 } else { 0.0 };
            rng.random_range(-1.0..1.0) + shift
        });
        let probe = LinearProbe::fit(&x, &labels);
        assert_eq!(probe.balanced_accuracy(&x, &labels), 1.0);
    }

    #[test]
    fn chance_on_uninformative_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 400;
        let labels: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let train = Array2::from_shape_fn((n, 4), |_| rng.random_range(-1.0..1.0));
        let test = Array2::from_shape_fn((n, 4), |_| rng.random_range(-1.0..1.0));
        let probe = LinearProbe::fit(&train, &labels);
        let acc = probe.balanced_accuracy(&test, &labels);
        assert!((acc - 0.5).abs() < 0.1, "accuracy {acc}");
    }

    #[test]
    fn spd_solver() {
        let a = ndarray::array![[4.0, 1.0], [1.0, 3.0]];
        let b = ndarray::array![1.0, 2.0];
        let x = solve_spd(&a, &b);
        assert!((a.dot(&x) - &b).iter().all(|v| v.abs() < 1e-12));
    }
}
