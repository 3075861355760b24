//! Feature encoder: shared backbone, square-ring partition, and one
//! refinement branch (fully connected + batch norm) per ring.

mod backbone;
mod partition;

pub use backbone::{Backbone, ResNet50, TinyCnn, RESNET50_STAGES};
pub use partition::RingPartition;

use ndarray::{Array1, Array2, Array3, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use skyalign_nn::param::join;
use skyalign_nn::{BatchNorm1d, Linear, Mode, Module, Param, Relu};

use crate::dataset::{batch_tensor, ImageSample};
use crate::error::{Error, Result};

pub const NUM_RINGS: usize = 4;

/// Per-channel input normalization (ImageNet statistics).
const INPUT_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const INPUT_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackboneKind {
    FullResidual50,
    TinyCnn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub backbone: BackboneKind,
    pub image_size: usize,
    pub d_embed: usize,
    pub num_rings: usize,
    pub remove_final_downsample: bool,
    /// Channel widths of the four tiny-backbone stages.
    pub tiny_widths: Vec<usize>,
    /// Linear + batch-norm layers per refinement branch.
    pub refine_depth: usize,
}

impl EncoderConfig {
    pub fn full(image_size: usize) -> Self {
        Self {
            backbone: BackboneKind::FullResidual50,
            image_size,
            d_embed: 512,
            num_rings: NUM_RINGS,
            remove_final_downsample: true,
            tiny_widths: vec![16, 32, 32, 64],
            refine_depth: 1,
        }
    }

    pub fn toy() -> Self {
        Self { backbone: BackboneKind::TinyCnn, image_size: 32, d_embed: 16, ..Self::full(32) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_rings != NUM_RINGS {
            return Err(Error::Config(format!("num_rings is fixed at {NUM_RINGS}")));
        }
        if self.d_embed == 0 || self.refine_depth == 0 {
            return Err(Error::Config("d_embed and refine_depth must be positive".into()));
        }
        if self.backbone == BackboneKind::TinyCnn && (self.tiny_widths.len() != 4 || self.tiny_widths.contains(&0)) {
            return Err(Error::Config("tiny backbone needs four positive stage widths".into()));
        }
        Ok(())
    }
}

/// Backbone output for one image, stored channel-first `(C, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMaps {
    pub values: Array3<f64>,
}

/// One embedding per ring, innermost first.
#[derive(Debug, Clone, PartialEq)]
pub struct PartEmbeddings {
    pub parts: Vec<Array1<f64>>,
}

impl PartEmbeddings {
    /// Concatenation innermost to outermost.
    pub fn concat(&self) -> Vec<f64> {
        self.parts.iter().flat_map(|p| p.iter().copied()).collect()
    }
}

/// Batched encoder output: maps `(N, C, H, W)` and one `(N, d_embed)` per ring.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub maps: Array4<f64>,
    pub parts: Vec<Array2<f64>>,
}

#[derive(Debug, Clone)]
pub struct RefineBranch {
    layers: Vec<(Linear, BatchNorm1d)>,
    relus: Vec<Relu>,
}

impl RefineBranch {
    pub fn new<R: Rng + ?Sized>(input: usize, d_embed: usize, depth: usize, rng: &mut R) -> Self {
        let layers = (0..depth)
            .map(|i| {
                let fan_in = if i == 0 { input } else { d_embed };
                (Linear::new(fan_in, d_embed, rng), BatchNorm1d::new(d_embed))
            })
            .collect();
        Self { layers, relus: (1..depth).map(|_| Relu::new()).collect() }
    }

    pub fn infer(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut h = x.clone();
        for (i, (lin, bn)) in self.layers.iter().enumerate() {
            if i > 0 {
                h = Relu::infer(&h);
            }
            h = bn.infer(&lin.infer(&h));
        }
        h
    }

    pub fn forward(&mut self, x: &Array2<f64>, mode: Mode) -> Array2<f64> {
        let mut h = x.clone();
        for (i, (lin, bn)) in self.layers.iter_mut().enumerate() {
            if i > 0 {
                h = self.relus[i - 1].forward(&h);
            }
            h = lin.forward(&h, mode);
            h = bn.forward(&h, mode);
        }
        h
    }

    pub fn backward(&mut self, dy: &Array2<f64>) -> Array2<f64> {
        let mut d = dy.clone();
        for i in (0..self.layers.len()).rev() {
            let (lin, bn) = &mut self.layers[i];
            d = bn.backward(&d);
            d = lin.backward(&d);
            if i > 0 {
                d = self.relus[i - 1].backward(&d);
            }
        }
        d
    }
}

impl Module for RefineBranch {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, (lin, bn)) in self.layers.iter_mut().enumerate() {
            lin.visit_params(&join(prefix, &format!("{i}.linear")), f);
            bn.visit_params(&join(prefix, &format!("{i}.bn")), f);
        }
    }
}

/// The refinement branches as one parameter group.
#[derive(Debug, Clone)]
pub struct Branches(pub Vec<RefineBranch>);

impl Module for Branches {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (l, b) in self.0.iter_mut().enumerate() {
            b.visit_params(&join(prefix, &l.to_string()), f);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub backbone: Backbone,
    pub partition: RingPartition,
    pub branches: Branches,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(config: &EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let backbone = match config.backbone {
            BackboneKind::TinyCnn => Backbone::Tiny(TinyCnn::new(&config.tiny_widths, rng)),
            BackboneKind::FullResidual50 => {
                Backbone::Residual50(Box::new(ResNet50::new(config.remove_final_downsample, rng)))
            }
        };
        let side = backbone
            .output_size(config.image_size)
            .ok_or_else(|| Error::Config(format!("image size {} too small for the backbone", config.image_size)))?;
        let partition = RingPartition::new(side, config.num_rings)?;
        let cf = backbone.out_channels();
        let branches =
            Branches((0..config.num_rings).map(|_| RefineBranch::new(cf, config.d_embed, config.refine_depth, rng)).collect());
        Ok(Self { config: config.clone(), backbone, partition, branches })
    }

    pub fn feature_channels(&self) -> usize {
        self.backbone.out_channels()
    }

    pub fn feature_size(&self) -> usize {
        self.partition.size()
    }

    pub fn descriptor_len(&self) -> usize {
        self.config.num_rings * self.config.d_embed
    }

    fn preprocess(&self, images: &Array4<f64>) -> Result<Array4<f64>> {
        let (_, c, h, w) = images.dim();
        if c != 3 || h != self.config.image_size || w != self.config.image_size {
            return Err(Error::Shape(format!(
                "encoder expects 3x{0}x{0} images, got {c}x{h}x{w}",
                self.config.image_size
            )));
        }
        let mut x = images.clone();
        for (ch, mut plane) in x.axis_iter_mut(Axis(1)).enumerate() {
            plane.mapv_inplace(|v| (v - INPUT_MEAN[ch]) / INPUT_STD[ch]);
        }
        Ok(x)
    }

    /// Backbone only: `(N, 3, S, S)` images to `(N, C, H, W)` maps.
    pub fn backbone_infer(&self, images: &Array4<f64>) -> Result<Array4<f64>> {
        Ok(self.backbone.infer(&self.preprocess(images)?))
    }

    /// Inference-mode pass; borrows immutably and caches nothing.
    pub fn infer(&self, images: &Array4<f64>) -> Result<EncoderOutput> {
        let maps = self.backbone_infer(images)?;
        let pooled = self.partition.pool(&maps)?;
        let parts = self.branches.0.iter().zip(&pooled).map(|(b, p)| b.infer(p)).collect();
        Ok(EncoderOutput { maps, parts })
    }

    /// Caching pass for a following `backward`.
    pub fn forward(&mut self, images: &Array4<f64>, mode: Mode) -> Result<EncoderOutput> {
        let x = self.preprocess(images)?;
        let maps = self.backbone.forward(&x, mode);
        let pooled = self.partition.pool(&maps)?;
        let parts = self.branches.0.iter_mut().zip(&pooled).map(|(b, p)| b.forward(p, mode)).collect();
        Ok(EncoderOutput { maps, parts })
    }

    /// Accumulate parameter gradients from part-embedding gradients plus an
    /// optional extra gradient arriving directly at the feature maps.
    pub fn backward(&mut self, d_parts: &[Array2<f64>], d_maps: Option<&Array4<f64>>) {
        let d_pooled: Vec<Array2<f64>> =
            self.branches.0.iter_mut().zip(d_parts).map(|(b, d)| b.backward(d)).collect();
        let mut dm = self.partition.backward(&d_pooled);
        if let Some(extra) = d_maps {
            dm += extra;
        }
        self.backbone.backward(&dm);
    }

    /// Encode a single sample in inference mode.
    pub fn encode(&self, sample: &ImageSample) -> Result<(FeatureMaps, PartEmbeddings)> {
        let x = batch_tensor::<rand_chacha::ChaCha8Rng>(&[sample], None)?;
        let out = self.infer(&x)?;
        let values = out.maps.index_axis(Axis(0), 0).to_owned();
        let parts = out.parts.iter().map(|p| p.row(0).to_owned()).collect();
        Ok((FeatureMaps { values }, PartEmbeddings { parts }))
    }
}

impl Module for Encoder {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.backbone.visit_params(&join(prefix, "backbone"), f);
        self.branches.visit_params(&join(prefix, "branches"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::View;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_encoder(seed: u64) -> Encoder {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Encoder::new(&EncoderConfig::toy(), &mut rng).unwrap()
    }

    fn image(seed: u64) -> ImageSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageSample::new(Array3::from_shape_fn((32, 32, 3), |_| rng.random_range(0.0..1.0)), View::Uav, 0).unwrap()
    }

    #[test]
    fn toy_encode_shapes() {
        let enc = toy_encoder(0);
        let (maps, parts) = enc.encode(&image(1)).unwrap();
        assert_eq!(maps.values.dim(), (64, 16, 16));
        assert_eq!(parts.parts.len(), 4);
        assert!(parts.parts.iter().all(|p| p.len() == 16 && p.iter().all(|v| v.is_finite())));
        assert_eq!(parts.concat().len(), 64);
    }

    #[test]
    fn batch_shapes() {
        let enc = toy_encoder(0);
        let out = enc.infer(&Array4::from_elem((5, 3, 32, 32), 0.3)).unwrap();
        assert_eq!(out.maps.dim(), (5, 64, 16, 16));
        assert!(out.parts.iter().all(|p| p.dim() == (5, 16)));
    }

    #[test]
    fn wrong_input_size_is_rejected() {
        let enc = toy_encoder(0);
        let err = enc.infer(&Array4::zeros((1, 3, 31, 31))).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
        let mut cfg = EncoderConfig::full(256);
        cfg.backbone = BackboneKind::TinyCnn;
        cfg.image_size = 24;
        // 24 -> 12 maps, not divisible by 8
        assert!(Encoder::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn inference_is_deterministic() {
        let enc = toy_encoder(3);
        let img = image(4);
        assert_eq!(enc.encode(&img).unwrap(), enc.encode(&img).unwrap());
    }

    #[test]
    fn eval_forward_matches_infer() {
        let mut enc = toy_encoder(5);
        let x = Array4::from_shape_fn((2, 3, 32, 32), |(n, c, i, j)| ((n + c + i * j) as f64 * 0.01).cos().abs());
        let a = enc.infer(&x).unwrap();
        let b = enc.forward(&x, Mode::Eval).unwrap();
        assert_eq!(a.maps, b.maps);
        assert_eq!(a.parts, b.parts);
    }

    #[test]
    fn refine_branch_is_linear_at_identity_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut branch = RefineBranch::new(4, 4, 1, &mut rng);
        branch.visit_params("", &mut |name, p| {
            if name == "0.linear.weight" {
                p.value = ndarray::Array2::<f64>::eye(4).into_dyn();
            }
        });
        let y = branch.infer(&Array2::zeros((1, 4)));
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn branches_hold_disjoint_parameters() {
        let mut enc = toy_encoder(0);
        let mut names = Vec::new();
        enc.visit_params("", &mut |n, _| names.push(n.to_string()));
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
        assert!(names.iter().any(|n| n.starts_with("branches.3.0.linear")));
    }
}
