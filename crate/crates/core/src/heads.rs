//! Location classifier over part embeddings and view discriminator over
//! backbone feature maps.

use ndarray::{Array1, Array2, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use skyalign_nn::param::join;
use skyalign_nn::{
    global_avg_pool, global_avg_pool_backward, AvgPool2d, Conv2d, Dropout, Linear, MaxPool2d, Mode, Module, Param,
    Relu,
};

use crate::error::{Error, Result};

/// Classifier weights start at N(0, 0.001^2).
const CLASSIFIER_INIT_STD: f64 = 0.001;

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut row in p.axis_iter_mut(Axis(0)) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
    p
}

/// Per-part location distributions for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct LocationProbs {
    pub per_part: Vec<Array1<f64>>,
}

impl LocationProbs {
    /// Split batched per-part probabilities `(N, C)` into per-sample values.
    pub fn from_batch(parts: &[Array2<f64>]) -> Vec<LocationProbs> {
        let n = parts.first().map_or(0, |p| p.nrows());
        (0..n)
            .map(|i| LocationProbs { per_part: parts.iter().map(|p| p.row(i).to_owned()).collect() })
            .collect()
    }
}

/// `q = [P(UAV), P(satellite)]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewProbs {
    pub q: [f64; 2],
}

impl ViewProbs {
    pub fn from_batch(probs: &Array2<f64>) -> Vec<ViewProbs> {
        probs.outer_iter().map(|r| ViewProbs { q: [r[0], r[1]] }).collect()
    }
}

#[derive(Debug, Clone)]
struct ClassifierBranch {
    dropout: Dropout,
    linear: Linear,
}

/// One dropout + fully connected branch per part.
#[derive(Debug, Clone)]
pub struct LocationClassifier {
    branches: Vec<ClassifierBranch>,
    pub num_classes: usize,
}

impl LocationClassifier {
    pub fn new<R: Rng + ?Sized>(num_parts: usize, d_embed: usize, num_classes: usize, dropout: f64, rng: &mut R) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 locations, got {num_classes}")));
        }
        let branches = (0..num_parts)
            .map(|_| ClassifierBranch {
                dropout: Dropout::new(dropout),
                linear: Linear::with_std(d_embed, num_classes, CLASSIFIER_INIT_STD, rng),
            })
            .collect();
        Ok(Self { branches, num_classes })
    }

    pub fn infer_logits(&self, parts: &[Array2<f64>]) -> Vec<Array2<f64>> {
        self.branches.iter().zip(parts).map(|(b, p)| b.linear.infer(p)).collect()
    }

    pub fn forward_logits<R: Rng + ?Sized>(&mut self, parts: &[Array2<f64>], mode: Mode, rng: &mut R) -> Vec<Array2<f64>> {
        self.branches
            .iter_mut()
            .zip(parts)
            .map(|(b, p)| {
                let h = b.dropout.forward(p, mode, rng);
                b.linear.forward(&h, mode)
            })
            .collect()
    }

    /// Gradients w.r.t. logits in, gradients w.r.t. part embeddings out.
    pub fn backward(&mut self, d_logits: &[Array2<f64>]) -> Vec<Array2<f64>> {
        self.branches
            .iter_mut()
            .zip(d_logits)
            .map(|(b, d)| {
                let h = b.linear.backward(d);
                b.dropout.backward(&h)
            })
            .collect()
    }

    /// Inference-mode probabilities, one `LocationProbs` per sample.
    pub fn classify(&self, parts: &[Array2<f64>]) -> Vec<LocationProbs> {
        let probs: Vec<Array2<f64>> = self.infer_logits(parts).iter().map(softmax_rows).collect();
        LocationProbs::from_batch(&probs)
    }

    /// Zero the last layer so every distribution is uniform.
    pub fn zero_final_layer(&mut self) {
        for b in &mut self.branches {
            b.linear.weight.value.fill(0.0);
            b.linear.bias.value.fill(0.0);
        }
    }
}

impl Module for LocationClassifier {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (l, b) in self.branches.iter_mut().enumerate() {
            b.linear.visit_params(&join(prefix, &l.to_string()), f);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pooling {
    StridedConv,
    MaxPool,
    AvgPool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    /// Output channels of conv blocks 1-3; empty means `Cf/2, Cf/4, Cf/8`.
    pub widths: Vec<usize>,
    pub pooling: Pooling,
    pub kernel: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { widths: Vec::new(), pooling: Pooling::StridedConv, kernel: 3 }
    }
}

impl DiscriminatorConfig {
    pub fn resolved_widths(&self, in_channels: usize) -> Vec<usize> {
        if self.widths.is_empty() {
            vec![(in_channels / 2).max(1), (in_channels / 4).max(1), (in_channels / 8).max(1)]
        } else {
            self.widths.clone()
        }
    }
}

#[derive(Debug, Clone)]
enum SpatialPool {
    None,
    Max(MaxPool2d),
    Avg(AvgPool2d),
}

#[derive(Debug, Clone)]
struct ConvBlock {
    conv: Conv2d,
    pool: SpatialPool,
    relu: Relu,
}

impl ConvBlock {
    fn infer(&self, x: &Array4<f64>) -> Array4<f64> {
        let h = self.conv.infer(x);
        let h = match &self.pool {
            SpatialPool::None => h,
            SpatialPool::Max(p) => p.infer(&h),
            SpatialPool::Avg(p) => p.infer(&h),
        };
        Relu::infer(&h)
    }

    fn forward(&mut self, x: &Array4<f64>, mode: Mode) -> Array4<f64> {
        let h = self.conv.forward(x, mode);
        let h = match &mut self.pool {
            SpatialPool::None => h,
            SpatialPool::Max(p) => p.forward(&h),
            SpatialPool::Avg(p) => p.forward(&h),
        };
        self.relu.forward(&h)
    }

    fn backward(&mut self, dy: &Array4<f64>, want_input: bool) -> Option<Array4<f64>> {
        let d = self.relu.backward(dy);
        let d = match &mut self.pool {
            SpatialPool::None => d,
            SpatialPool::Max(p) => p.backward(&d),
            SpatialPool::Avg(p) => p.backward(&d),
        };
        if want_input {
            Some(self.conv.backward(&d))
        } else {
            self.conv.backward_params_only(&d);
            None
        }
    }
}

/// Three conv blocks (the last two halve the resolution), global average
/// pooling and a two-way fully connected layer.
#[derive(Debug, Clone)]
pub struct ViewDiscriminator {
    blocks: Vec<ConvBlock>,
    head: Linear,
    in_channels: usize,
    in_size: usize,
    pooled_side: Option<usize>,
}

impl ViewDiscriminator {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, in_size: usize, cfg: &DiscriminatorConfig, rng: &mut R) -> Result<Self> {
        let widths = cfg.resolved_widths(in_channels);
        if widths.len() != 3 || widths.contains(&0) {
            return Err(Error::Config("discriminator needs three positive block widths".into()));
        }
        if cfg.kernel % 2 == 0 {
            return Err(Error::Config("discriminator kernel size must be odd".into()));
        }
        if in_size % 4 != 0 {
            return Err(Error::Config(format!("discriminator input side {in_size} must be divisible by 4")));
        }
        let pad = cfg.kernel / 2;
        let mut cin = in_channels;
        let blocks = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let downsample = i > 0;
                let stride = if downsample && cfg.pooling == Pooling::StridedConv { 2 } else { 1 };
                let pool = match (downsample, cfg.pooling) {
                    (true, Pooling::MaxPool) => SpatialPool::Max(MaxPool2d::new(2, 2, 0)),
                    (true, Pooling::AvgPool) => SpatialPool::Avg(AvgPool2d::new(2, 2)),
                    _ => SpatialPool::None,
                };
                let conv = Conv2d::new(cin, w, cfg.kernel, stride, pad, true, rng);
                cin = w;
                ConvBlock { conv, pool, relu: Relu::new() }
            })
            .collect();
        let head = Linear::with_std(cin, 2, CLASSIFIER_INIT_STD, rng);
        Ok(Self { blocks, head, in_channels, in_size, pooled_side: None })
    }

    fn check(&self, maps: &Array4<f64>) -> Result<()> {
        let (_, c, h, w) = maps.dim();
        if c != self.in_channels || h != self.in_size || w != self.in_size {
            return Err(Error::Shape(format!(
                "discriminator expects {}x{1}x{1} maps, got {c}x{h}x{w}",
                self.in_channels, self.in_size
            )));
        }
        Ok(())
    }

    /// Spatial side after each block, for an input of the configured size.
    pub fn block_resolutions(&self) -> Vec<usize> {
        let mut s = self.in_size;
        self.blocks
            .iter()
            .map(|b| {
                s = b.conv.output_size(s).unwrap();
                if let SpatialPool::Max(_) | SpatialPool::Avg(_) = b.pool {
                    s /= 2;
                }
                s
            })
            .collect()
    }

    pub fn infer_logits(&self, maps: &Array4<f64>) -> Result<Array2<f64>> {
        self.check(maps)?;
        let h = self.blocks.iter().fold(maps.clone(), |h, b| b.infer(&h));
        Ok(self.head.infer(&global_avg_pool(&h)))
    }

    pub fn forward_logits(&mut self, maps: &Array4<f64>, mode: Mode) -> Result<Array2<f64>> {
        self.check(maps)?;
        let mut h = maps.clone();
        for b in &mut self.blocks {
            h = b.forward(&h, mode);
        }
        self.pooled_side = Some(h.dim().2);
        let g = global_avg_pool(&h);
        Ok(self.head.forward(&g, mode))
    }

    /// Backpropagate logit gradients; returns the gradient w.r.t. the input
    /// maps when `want_input` is set.
    pub fn backward(&mut self, d_logits: &Array2<f64>, want_input: bool) -> Option<Array4<f64>> {
        let side = self.pooled_side.take().expect("discriminator backward without forward");
        let dg = self.head.backward(d_logits);
        let mut d = global_avg_pool_backward(&dg, side, side);
        for (i, b) in self.blocks.iter_mut().enumerate().rev() {
            match b.backward(&d, want_input || i > 0) {
                Some(next) => d = next,
                None => return None,
            }
        }
        Some(d)
    }

    /// Inference-mode view probabilities.
    pub fn discriminate(&self, maps: &Array4<f64>) -> Result<Vec<ViewProbs>> {
        Ok(ViewProbs::from_batch(&softmax_rows(&self.infer_logits(maps)?)))
    }

    pub fn zero_final_layer(&mut self) {
        self.head.weight.value.fill(0.0);
        self.head.bias.value.fill(0.0);
    }
}

impl Module for ViewDiscriminator {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.conv.visit_params(&join(prefix, &format!("block{}", i + 1)), f);
        }
        self.head.visit_params(&join(prefix, "head"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_maps(shape: (usize, usize, usize, usize), scale: f64, rng: &mut ChaCha8Rng) -> Array4<f64> {
        Array4::from_shape_fn(shape, |_| rng.random_range(-scale..scale))
    }

    #[test]
    fn zero_final_layer_gives_uniform_locations() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut clf = LocationClassifier::new(4, 16, 5, 0.5, &mut rng).unwrap();
        clf.zero_final_layer();
        let parts: Vec<Array2<f64>> = (0..4).map(|_| Array2::from_elem((3, 16), 0.7)).collect();
        for probs in clf.classify(&parts) {
            assert_eq!(probs.per_part.len(), 4);
            for p in &probs.per_part {
                assert!(p.iter().all(|&v| (v - 0.2).abs() < 1e-15));
            }
        }
    }

    #[test]
    fn classifier_needs_two_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(LocationClassifier::new(4, 16, 1, 0.5, &mut rng).is_err());
    }

    #[test]
    fn full_profile_classifier_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let clf = LocationClassifier::new(4, 512, 701, 0.5, &mut rng).unwrap();
        let parts: Vec<Array2<f64>> = (0..4).map(|_| Array2::zeros((1, 512))).collect();
        let probs = clf.classify(&parts);
        assert!(probs[0].per_part.iter().all(|p| p.len() == 701));
        assert!(probs[0].per_part.iter().all(|p| (p.sum() - 1.0).abs() < 1e-5));
    }

    #[test]
    fn classifier_inference_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let clf = LocationClassifier::new(4, 8, 3, 0.5, &mut rng).unwrap();
        let parts: Vec<Array2<f64>> = (0..4).map(|_| random_maps((2, 1, 1, 8), 1.0, &mut rng).into_shape_with_order((2, 8)).unwrap()).collect();
        assert_eq!(clf.classify(&parts), clf.classify(&parts));
    }

    #[test]
    fn discriminator_resolutions_and_uniform_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for pooling in [Pooling::StridedConv, Pooling::MaxPool, Pooling::AvgPool] {
            let cfg = DiscriminatorConfig { pooling, ..Default::default() };
            let mut d = ViewDiscriminator::new(64, 16, &cfg, &mut rng).unwrap();
            assert_eq!(d.block_resolutions(), vec![16, 8, 4]);
            d.zero_final_layer();
            let maps = random_maps((3, 64, 16, 16), 1.0, &mut rng);
            for q in d.discriminate(&maps).unwrap() {
                assert_eq!(q.q, [0.5, 0.5]);
            }
        }
    }

    #[test]
    fn discriminator_default_widths_taper() {
        assert_eq!(DiscriminatorConfig::default().resolved_widths(64), vec![32, 16, 8]);
        assert_eq!(DiscriminatorConfig::default().resolved_widths(2048), vec![1024, 512, 256]);
    }

    #[test]
    fn discriminator_outputs_are_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = ViewDiscriminator::new(8, 8, &DiscriminatorConfig::default(), &mut rng).unwrap();
        for trial in 0..1000 {
            let scale = if trial % 10 == 0 { 1e3 } else { 1.0 };
            let maps = random_maps((1, 8, 8, 8), scale, &mut rng);
            let q = d.discriminate(&maps).unwrap()[0].q;
            assert!(q.iter().all(|v| v.is_finite() && *v >= 0.0));
            assert!((q[0] + q[1] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn discriminator_rejects_wrong_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = ViewDiscriminator::new(8, 8, &DiscriminatorConfig::default(), &mut rng).unwrap();
        assert!(d.discriminate(&Array4::zeros((1, 8, 16, 16))).is_err());
        assert!(d.discriminate(&Array4::zeros((1, 4, 8, 8))).is_err());
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let p = softmax_rows(&ndarray::array![[1000.0, -1000.0, 999.0]]);
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p.sum() - 1.0).abs() < 1e-15);
    }
}
