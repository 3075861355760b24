//! Location, view and adversarial cross-entropies and their weighted sum.
//!
//! All losses are sums over the batch (and over parts for the location
//! loss). Probabilities are clamped below at [`PROB_EPS`] before the log.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::View;
use crate::error::{Error, Result};
use crate::heads::{softmax_rows, LocationProbs, ViewProbs};

pub const PROB_EPS: f64 = 1e-12;

fn neg_log(p: f64) -> f64 {
    -p.max(PROB_EPS).ln()
}

/// `-sum_i sum_l log p_{i,l}(y_i)`.
pub fn location_loss(probs: &[LocationProbs], labels: &[usize]) -> f64 {
    assert_eq!(probs.len(), labels.len(), "one label per sample");
    probs
        .iter()
        .zip(labels)
        .map(|(p, &y)| p.per_part.iter().map(|part| neg_log(part[y])).sum::<f64>())
        .sum()
}

/// `-sum_UAV log q_1 - sum_SAT log q_2`.
pub fn view_loss(q: &[ViewProbs], views: &[View]) -> f64 {
    assert_eq!(q.len(), views.len(), "one view label per sample");
    q.iter().zip(views).map(|(q, v)| neg_log(q.q[v.index()])).sum()
}

/// Cross-entropy against the opposite view labels:
/// `-sum_UAV log q_2 - sum_SAT log q_1`.
pub fn adversarial_loss(q: &[ViewProbs], views: &[View]) -> f64 {
    let flipped: Vec<View> = views.iter().map(|v| v.flipped()).collect();
    view_loss(q, &flipped)
}

/// `l_loc + alpha * l_adv`.
pub fn combined_loss(location: f64, adversarial: f64, alpha: f64) -> Result<f64> {
    if !(alpha >= 0.0) {
        return Err(Error::Config(format!("adversarial weight must be >= 0, got {alpha}")));
    }
    Ok(location + alpha * adversarial)
}

/// Summed cross-entropy of row-wise softmax and its gradient w.r.t. the
/// logits. The loss value uses the clamped log; the gradient is that of
/// the unclamped cross-entropy, `softmax - onehot`.
pub fn cross_entropy_with_grad(logits: &Array2<f64>, targets: &[usize]) -> (f64, Array2<f64>) {
    assert_eq!(logits.nrows(), targets.len());
    let mut grad = softmax_rows(logits);
    let mut loss = 0.0;
    for (mut row, &t) in grad.outer_iter_mut().zip(targets) {
        loss += neg_log(row[t]);
        row[t] -= 1.0;
    }
    (loss, grad)
}

/// Location loss over per-part logits, with per-part logit gradients.
pub fn location_loss_from_logits(logits: &[Array2<f64>], labels: &[usize]) -> (f64, Vec<Array2<f64>>) {
    let mut total = 0.0;
    let grads = logits
        .iter()
        .map(|l| {
            let (loss, g) = cross_entropy_with_grad(l, labels);
            total += loss;
            g
        })
        .collect();
    (total, grads)
}

pub fn view_loss_from_logits(logits: &Array2<f64>, views: &[View]) -> (f64, Array2<f64>) {
    let targets: Vec<usize> = views.iter().map(|v| v.index()).collect();
    cross_entropy_with_grad(logits, &targets)
}

pub fn adversarial_loss_from_logits(logits: &Array2<f64>, views: &[View]) -> (f64, Array2<f64>) {
    let targets: Vec<usize> = views.iter().map(|v| v.flipped().index()).collect();
    cross_entropy_with_grad(logits, &targets)
}

/// Loss values of one training iteration (batch sums).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub location_loss: f64,
    pub view_loss: f64,
    pub adversarial_loss: f64,
    pub combined: f64,
    pub alpha: f64,
    pub batch_size: usize,
}

impl LossReport {
    pub fn new(location_loss: f64, view_loss: f64, adversarial_loss: f64, alpha: f64, batch_size: usize) -> Result<Self> {
        let combined = combined_loss(location_loss, adversarial_loss, alpha)?;
        Ok(Self { location_loss, view_loss, adversarial_loss, combined, alpha, batch_size })
    }

    /// The same values divided by the batch size (what the optimizer sees).
    pub fn per_sample(&self) -> LossReport {
        let n = self.batch_size.max(1) as f64;
        LossReport {
            location_loss: self.location_loss / n,
            view_loss: self.view_loss / n,
            adversarial_loss: self.adversarial_loss / n,
            combined: self.combined / n,
            ..*self
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};
    use std::f64::consts::LN_2;

    fn uniform_parts(c: usize) -> LocationProbs {
        LocationProbs { per_part: (0..4).map(|_| Array1::from_elem(c, 1.0 / c as f64)).collect() }
    }

    #[test]
    fn uniform_location_loss() {
        let l = location_loss(&[uniform_parts(2)], &[1]);
        assert!((l - 4.0 * LN_2).abs() < 1e-12);
        assert!((l - 2.77259).abs() < 1e-5);
    }

    #[test]
    fn perfect_location_prediction_is_zero() {
        let p = LocationProbs { per_part: (0..4).map(|_| array![0.0, 1.0, 0.0]).collect() };
        assert_eq!(location_loss(&[p], &[1]), 0.0);
    }

    #[test]
    fn two_sample_location_loss() {
        let mk = |ps: [f64; 4]| LocationProbs { per_part: ps.iter().map(|&p| array![p, 1.0 - p]).collect() };
        let l = location_loss(&[mk([0.5, 0.25, 0.125, 0.0625]), mk([1.0; 4])], &[0, 0]);
        // ln 2 + ln 4 + ln 8 + ln 16 = 10 ln 2
        assert!((l - 10.0 * LN_2).abs() < 1e-12);
        assert!((l - 6.93147).abs() < 1e-5);
    }

    #[test]
    fn view_loss_examples() {
        assert_eq!(view_loss(&[ViewProbs { q: [1.0, 0.0] }], &[View::Uav]), 0.0);
        let half = ViewProbs { q: [0.5, 0.5] };
        assert!((view_loss(&[half, half], &[View::Uav, View::Satellite]) - 2.0 * LN_2).abs() < 1e-15);
        let q: Vec<ViewProbs> = [0.9, 0.8, 0.5].iter().map(|&p| ViewProbs { q: [p, 1.0 - p] }).collect();
        let l = view_loss(&q, &[View::Uav; 3]);
        assert!((l - 1.02165).abs() < 1e-5);
    }

    #[test]
    fn adversarial_loss_examples() {
        assert_eq!(adversarial_loss(&[ViewProbs { q: [0.0, 1.0] }], &[View::Uav]), 0.0);
        let half = ViewProbs { q: [0.5, 0.5] };
        let views = [View::Uav, View::Satellite, View::Uav];
        assert_eq!(adversarial_loss(&[half; 3], &views), view_loss(&[half; 3], &views));
    }

    #[test]
    fn clamping_keeps_losses_finite() {
        let l = view_loss(&[ViewProbs { q: [0.0, 1.0] }], &[View::Uav]);
        assert!((l - 1e-12f64.ln().abs()).abs() < 1e-9);
    }

    #[test]
    fn combined_loss_examples() {
        assert!((combined_loss(2.0, 1.0, 0.9).unwrap() - 2.9).abs() < 1e-15);
        assert_eq!(combined_loss(3.5, 7.0, 0.0).unwrap(), 3.5);
        assert_eq!(combined_loss(0.0, 2.0, 1.5).unwrap(), 3.0);
        assert!(matches!(combined_loss(1.0, 1.0, -0.1), Err(Error::Config(_))));
    }

    #[test]
    fn report_invariant() {
        let r = LossReport::new(3.0, 1.0, 2.0, 1.1, 4).unwrap();
        assert!((r.combined - (3.0 + 1.1 * 2.0)).abs() < 1e-9);
        assert!((r.per_sample().combined - r.combined / 4.0).abs() < 1e-15);
    }

    #[test]
    fn logit_form_agrees_with_probability_form() {
        let logits = array![[0.3, -1.2], [2.0, 0.1], [-0.5, -0.4]];
        let views = [View::Uav, View::Satellite, View::Satellite];
        let q = ViewProbs::from_batch(&softmax_rows(&logits));
        let (lv, _) = view_loss_from_logits(&logits, &views);
        let (la, _) = adversarial_loss_from_logits(&logits, &views);
        assert!((lv - view_loss(&q, &views)).abs() < 1e-14);
        assert!((la - adversarial_loss(&q, &views)).abs() < 1e-14);
    }
}
