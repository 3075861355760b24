//! Convolutional backbones producing the shared feature maps.
//!
//! `TinyCnn` is the desk-scale network; `ResNet50` follows the standard
//! 50-layer bottleneck layout (parameter names match the usual torchvision
//! naming) with an optional stride-1 final stage.

use ndarray::Array4;
use rand::Rng;
use skyalign_nn::param::join;
use skyalign_nn::{BatchNorm2d, Conv2d, MaxPool2d, Mode, Module, Param, Relu};

/// Convolution, batch normalization, ReLU.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    relu: Relu,
}

impl ConvBnRelu {
    pub fn new<R: Rng + ?Sized>(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, rng: &mut R) -> Self {
        Self { conv: Conv2d::new(cin, cout, k, stride, pad, false, rng), bn: BatchNorm2d::new(cout), relu: Relu::new() }
    }

    pub fn infer(&self, x: &Array4<f64>) -> Array4<f64> {
        Relu::infer(&self.bn.infer(&self.conv.infer(x)))
    }

    pub fn forward(&mut self, x: &Array4<f64>, mode: Mode) -> Array4<f64> {
        let y = self.conv.forward(x, mode);
        let y = self.bn.forward(&y, mode);
        self.relu.forward(&y)
    }

    pub fn backward(&mut self, dy: &Array4<f64>, want_input: bool) -> Option<Array4<f64>> {
        let d = self.relu.backward(dy);
        let d = self.bn.backward(&d);
        if want_input {
            Some(self.conv.backward(&d))
        } else {
            self.conv.backward_params_only(&d);
            None
        }
    }

    fn visit(&mut self, conv: &str, bn: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv.visit_params(conv, f);
        self.bn.visit_params(bn, f);
    }
}

/// Four 3x3 conv stages; the first has stride 2, the rest stride 1.
#[derive(Debug, Clone)]
pub struct TinyCnn {
    pub stages: Vec<ConvBnRelu>,
}

impl TinyCnn {
    pub fn new<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Self {
        let mut cin = 3;
        let stages = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let stride = if i == 0 { 2 } else { 1 };
                let s = ConvBnRelu::new(cin, w, 3, stride, 1, rng);
                cin = w;
                s
            })
            .collect();
        Self { stages }
    }
}

#[derive(Debug, Clone)]
pub struct Bottleneck {
    c1: ConvBnRelu,
    c2: ConvBnRelu,
    conv3: Conv2d,
    bn3: BatchNorm2d,
    downsample: Option<(Conv2d, BatchNorm2d)>,
    relu: Relu,
}

impl Bottleneck {
    fn new<R: Rng + ?Sized>(cin: usize, width: usize, stride: usize, rng: &mut R) -> Self {
        let cout = width * 4;
        let downsample = (stride != 1 || cin != cout)
            .then(|| (Conv2d::new(cin, cout, 1, stride, 0, false, rng), BatchNorm2d::new(cout)));
        Self {
            c1: ConvBnRelu::new(cin, width, 1, 1, 0, rng),
            c2: ConvBnRelu::new(width, width, 3, stride, 1, rng),
            conv3: Conv2d::new(width, cout, 1, 1, 0, false, rng),
            bn3: BatchNorm2d::new(cout),
            downsample,
            relu: Relu::new(),
        }
    }

    fn infer(&self, x: &Array4<f64>) -> Array4<f64> {
        let main = self.bn3.infer(&self.conv3.infer(&self.c2.infer(&self.c1.infer(x))));
        let short = match &self.downsample {
            Some((c, b)) => b.infer(&c.infer(x)),
            None => x.clone(),
        };
        Relu::infer(&(main + short))
    }

    fn forward(&mut self, x: &Array4<f64>, mode: Mode) -> Array4<f64> {
        let h = self.c1.forward(x, mode);
        let h = self.c2.forward(&h, mode);
        let h = self.conv3.forward(&h, mode);
        let main = self.bn3.forward(&h, mode);
        let short = match &mut self.downsample {
            Some((c, b)) => {
                let s = c.forward(x, mode);
                b.forward(&s, mode)
            }
            None => x.clone(),
        };
        self.relu.forward(&(main + short))
    }

    fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let d = self.relu.backward(dy);
        let dm = self.bn3.backward(&d);
        let dm = self.conv3.backward(&dm);
        let dm = self.c2.backward(&dm, true).unwrap();
        let dm = self.c1.backward(&dm, true).unwrap();
        let ds = match &mut self.downsample {
            Some((c, b)) => {
                let t = b.backward(&d);
                c.backward(&t)
            }
            None => d,
        };
        dm + ds
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.c1.visit(&join(prefix, "conv1"), &join(prefix, "bn1"), f);
        self.c2.visit(&join(prefix, "conv2"), &join(prefix, "bn2"), f);
        self.conv3.visit_params(&join(prefix, "conv3"), f);
        self.bn3.visit_params(&join(prefix, "bn3"), f);
        if let Some((c, b)) = &mut self.downsample {
            c.visit_params(&join(prefix, "downsample.0"), f);
            b.visit_params(&join(prefix, "downsample.1"), f);
        }
    }
}

/// Stage layout of the 50-layer network: (blocks, bottleneck width, stride).
pub const RESNET50_STAGES: [(usize, usize, usize); 4] = [(3, 64, 1), (4, 128, 2), (6, 256, 2), (3, 512, 2)];

#[derive(Debug, Clone)]
pub struct ResNet50 {
    stem: ConvBnRelu,
    pool: MaxPool2d,
    layers: Vec<Vec<Bottleneck>>,
    pub final_stride: usize,
}

impl ResNet50 {
    pub fn new<R: Rng + ?Sized>(remove_final_downsample: bool, rng: &mut R) -> Self {
        let stem = ConvBnRelu::new(3, 64, 7, 2, 3, rng);
        let mut cin = 64;
        let final_stride = if remove_final_downsample { 1 } else { 2 };
        let layers = RESNET50_STAGES
            .iter()
            .enumerate()
            .map(|(i, &(blocks, width, stride))| {
                let stride = if i == 3 { final_stride } else { stride };
                (0..blocks)
                    .map(|b| {
                        let blk = Bottleneck::new(cin, width, if b == 0 { stride } else { 1 }, rng);
                        cin = width * 4;
                        blk
                    })
                    .collect()
            })
            .collect();
        Self { stem, pool: MaxPool2d::new(3, 2, 1), layers, final_stride }
    }

    pub fn output_size(&self, input: usize) -> Option<usize> {
        let mut s = self.stem.conv.output_size(input)?;
        s = self.pool.output_size(s);
        for (i, &(_, _, stride)) in RESNET50_STAGES.iter().enumerate() {
            let stride = if i == 3 { self.final_stride } else { stride };
            s = (s + 2 - 3) / stride + 1;
        }
        Some(s)
    }
}

#[derive(Debug, Clone)]
pub enum Backbone {
    Tiny(TinyCnn),
    Residual50(Box<ResNet50>),
}

impl Backbone {
    pub fn out_channels(&self) -> usize {
        match self {
            Backbone::Tiny(t) => t.stages.last().map_or(3, |s| s.conv.out_channels),
            Backbone::Residual50(_) => 2048,
        }
    }

    /// Spatial side of the feature maps for a square input of side `input`.
    pub fn output_size(&self, input: usize) -> Option<usize> {
        match self {
            Backbone::Tiny(t) => t.stages.iter().try_fold(input, |s, st| st.conv.output_size(s)),
            Backbone::Residual50(r) => r.output_size(input),
        }
    }

    pub fn infer(&self, x: &Array4<f64>) -> Array4<f64> {
        match self {
            Backbone::Tiny(t) => t.stages.iter().fold(x.clone(), |h, s| s.infer(&h)),
            Backbone::Residual50(r) => {
                let mut h = r.pool.infer(&r.stem.infer(x));
                for layer in &r.layers {
                    for blk in layer {
                        h = blk.infer(&h);
                    }
                }
                h
            }
        }
    }

    pub fn forward(&mut self, x: &Array4<f64>, mode: Mode) -> Array4<f64> {
        match self {
            Backbone::Tiny(t) => {
                let mut h = x.clone();
                for s in &mut t.stages {
                    h = s.forward(&h, mode);
                }
                h
            }
            Backbone::Residual50(r) => {
                let h = r.stem.forward(x, mode);
                let mut h = r.pool.forward(&h);
                for layer in &mut r.layers {
                    for blk in layer {
                        h = blk.forward(&h, mode);
                    }
                }
                h
            }
        }
    }

    /// Backpropagate into the parameters; the image gradient is not needed.
    pub fn backward(&mut self, dy: &Array4<f64>) {
        match self {
            Backbone::Tiny(t) => {
                let mut d = dy.clone();
                let n = t.stages.len();
                for (i, s) in t.stages.iter_mut().enumerate().rev() {
                    match s.backward(&d, i > 0) {
                        Some(next) => d = next,
                        None => debug_assert_eq!(i, 0, "only the first of {n} stages skips input grads"),
                    }
                }
            }
            Backbone::Residual50(r) => {
                let mut d = dy.clone();
                for layer in r.layers.iter_mut().rev() {
                    for blk in layer.iter_mut().rev() {
                        d = blk.backward(&d);
                    }
                }
                let d = r.pool.backward(&d);
                r.stem.backward(&d, false);
            }
        }
    }
}

impl Module for Backbone {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        match self {
            Backbone::Tiny(t) => {
                for (i, s) in t.stages.iter_mut().enumerate() {
                    let p = join(prefix, &format!("stage{i}"));
                    s.visit(&join(&p, "conv"), &join(&p, "bn"), f);
                }
            }
            Backbone::Residual50(r) => {
                r.stem.visit(&join(prefix, "conv1"), &join(prefix, "bn1"), f);
                for (li, layer) in r.layers.iter_mut().enumerate() {
                    for (bi, blk) in layer.iter_mut().enumerate() {
                        blk.visit(&join(prefix, &format!("layer{}.{bi}", li + 1)), f);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tiny_backbone_halves_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = Backbone::Tiny(TinyCnn::new(&[8, 16, 32, 64], &mut rng));
        assert_eq!(b.output_size(32), Some(16));
        assert_eq!(b.out_channels(), 64);
        let y = b.infer(&Array4::zeros((2, 3, 32, 32)));
        assert_eq!(y.dim(), (2, 64, 16, 16));
    }

    #[test]
    fn residual50_has_standard_parameter_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = Backbone::Residual50(Box::new(ResNet50::new(true, &mut rng)));
        // 23.5M trainable parameters without the ImageNet classifier
        assert_eq!(skyalign_nn::param::count_trainable(&mut b), 23_508_032);
        let mut names = Vec::new();
        b.visit_params("", &mut |n, _| names.push(n.to_string()));
        assert!(names.contains(&"layer4.0.downsample.0.weight".to_string()));
        assert!(names.contains(&"bn1.running_var".to_string()));
    }

    #[test]
    fn residual50_stride_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(ResNet50::new(true, &mut rng).output_size(256), Some(16));
        assert_eq!(ResNet50::new(false, &mut rng).output_size(256), Some(8));
        assert_eq!(ResNet50::new(true, &mut rng).output_size(384), Some(24));
    }

    #[test]
    fn tiny_backbone_gradient_reaches_first_stage() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut b = Backbone::Tiny(TinyCnn::new(&[4, 4, 4, 4], &mut rng));
        let x = Array4::from_shape_fn((2, 3, 8, 8), |(n, c, i, j)| ((n + c * 3 + i * 5 + j * 7) as f64).sin());
        let y = b.forward(&x, Mode::Train);
        b.backward(&Array4::ones(y.dim()));
        let mut first_grad = 0.0;
        b.visit_params("", &mut |name, p| {
            if name == "stage0.conv.weight" {
                first_grad = p.grad.iter().map(|g| g.abs()).sum();
            }
        });
        assert!(first_grad > 0.0);
    }
}
