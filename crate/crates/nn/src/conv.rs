use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array4, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;

use crate::init::kaiming_normal;
use crate::param::{join, Module, Param};
use crate::Mode;

/// 2-D convolution over NCHW tensors, square kernel, symmetric zero padding.
///
/// Implemented as im2col followed by a matrix product per image.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    input: Option<Array4<f64>>,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        assert!(kernel >= 1 && stride >= 1, "kernel and stride must be positive");
        let fan_in = in_channels * kernel * kernel;
        let weight = Param::new(kaiming_normal(&[out_channels, in_channels, kernel, kernel], fan_in, rng));
        let bias = bias.then(|| Param::zeros(&[out_channels]));
        Self { weight, bias, in_channels, out_channels, kernel, stride, padding, input: None }
    }

    pub fn output_size(&self, size: usize) -> Option<usize> {
        let padded = size + 2 * self.padding;
        (padded >= self.kernel).then(|| (padded - self.kernel) / self.stride + 1)
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn weight_matrix(&self) -> ArrayView2<'_, f64> {
        self.weight
            .value
            .view()
            .into_shape_with_order((self.out_channels, self.patch_len()))
            .expect("conv weight is contiguous")
    }

    fn check_input(&self, x: &Array4<f64>) -> (usize, usize, usize, usize) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "conv input has {c} channels, expected {}", self.in_channels);
        let ho = self.output_size(h).expect("input smaller than kernel");
        let wo = self.output_size(w).expect("input smaller than kernel");
        (n, h, ho, wo)
    }

    /// Forward pass without caching; identical numerics to `forward`.
    pub fn infer(&self, x: &Array4<f64>) -> Array4<f64> {
        let (n, h, ho, wo) = self.check_input(x);
        let w = x.dim().3;
        let x = x.as_standard_layout();
        let p = ho * wo;
        let mut out = Array4::zeros((n, self.out_channels, ho, wo));
        let mut col = Array2::zeros((self.patch_len(), p));
        let wm = self.weight_matrix();
        for i in 0..n {
            let xi = x.slice(s![i, .., .., ..]);
            let xs = xi.as_slice().expect("standard layout");
            let mut yi = out.slice_mut(s![i, .., .., ..]);
            let mut y2: ArrayViewMut2<f64> = yi
                .view_mut()
                .into_shape_with_order((self.out_channels, p))
                .expect("contiguous output");
            if self.is_pointwise() {
                let xv = ArrayView2::from_shape((self.in_channels, p), xs).expect("pointwise view");
                general_mat_mul(1.0, &wm, &xv, 0.0, &mut y2);
            } else {
                im2col(xs, self.in_channels, h, w, self.kernel, self.stride, self.padding, ho, wo, col.as_slice_mut().unwrap());
                general_mat_mul(1.0, &wm, &col, 0.0, &mut y2);
            }
            if let Some(b) = &self.bias {
                for (mut row, &bv) in y2.axis_iter_mut(Axis(0)).zip(b.value.iter()) {
                    row += bv;
                }
            }
        }
        out
    }

    pub fn forward(&mut self, x: &Array4<f64>, _mode: Mode) -> Array4<f64> {
        let y = self.infer(x);
        self.input = Some(x.as_standard_layout().into_owned());
        y
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&mut self, grad_out: &Array4<f64>) -> Array4<f64> {
        self.backward_impl(grad_out, true).expect("input gradient requested")
    }

    /// Like `backward` but skips the input gradient (first layer of a network).
    pub fn backward_params_only(&mut self, grad_out: &Array4<f64>) {
        self.backward_impl(grad_out, false);
    }

    fn backward_impl(&mut self, grad_out: &Array4<f64>, want_input: bool) -> Option<Array4<f64>> {
        let x = self.input.take().expect("Conv2d::backward without a cached forward");
        let (n, c, h, w) = x.dim();
        let (_, co, ho, wo) = grad_out.dim();
        assert_eq!(co, self.out_channels);
        let p = ho * wo;
        let k2 = self.patch_len();
        let dy = grad_out.as_standard_layout();
        let mut dw = Array2::<f64>::zeros((co, k2));
        let mut dx = want_input.then(|| Array4::<f64>::zeros((n, c, h, w)));
        let mut col = Array2::zeros((k2, p));
        let mut dcol = Array2::zeros((k2, p));
        let wm = self.weight_matrix().to_owned();
        for i in 0..n {
            let xi = x.slice(s![i, .., .., ..]);
            let xs = xi.as_slice().expect("standard layout");
            let dyi = dy.slice(s![i, .., .., ..]);
            let dy2 = dyi.into_shape_with_order((co, p)).expect("contiguous grad");
            if self.is_pointwise() {
                let xv = ArrayView2::from_shape((c, p), xs).expect("pointwise view");
                general_mat_mul(1.0, &dy2, &xv.t(), 1.0, &mut dw);
            } else {
                im2col(xs, c, h, w, self.kernel, self.stride, self.padding, ho, wo, col.as_slice_mut().unwrap());
                general_mat_mul(1.0, &dy2, &col.t(), 1.0, &mut dw);
            }
            if let Some(b) = &mut self.bias {
                for (g, row) in b.grad.iter_mut().zip(dy2.axis_iter(Axis(0))) {
                    *g += row.sum();
                }
            }
            if let Some(dx) = dx.as_mut() {
                general_mat_mul(1.0, &wm.t(), &dy2, 0.0, &mut dcol);
                let mut dxi = dx.slice_mut(s![i, .., .., ..]);
                let dxs = dxi.as_slice_mut().expect("standard layout");
                if self.is_pointwise() {
                    dxs.copy_from_slice(dcol.as_slice().unwrap());
                } else {
                    col2im(dcol.as_slice().unwrap(), c, h, w, self.kernel, self.stride, self.padding, ho, wo, dxs);
                }
            }
        }
        let mut wg = self
            .weight
            .grad
            .view_mut()
            .into_shape_with_order((co, k2))
            .expect("contiguous grad");
        wg += &dw;
        dx
    }
}

impl Module for Conv2d {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    col: &mut [f64],
) {
    let p = ho * wo;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                for oh in 0..ho {
                    let ih = (oh * stride + ki) as isize - pad as isize;
                    let out_row = &mut dst[oh * wo..(oh + 1) * wo];
                    if ih < 0 || ih >= h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[ih as usize * w..(ih as usize + 1) * w];
                    for (ow, v) in out_row.iter_mut().enumerate() {
                        let iw = (ow * stride + kj) as isize - pad as isize;
                        *v = if iw >= 0 && iw < w as isize { src[iw as usize] } else { 0.0 };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    col: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    x: &mut [f64],
) {
    let p = ho * wo;
    x.fill(0.0);
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &col[row * p..(row + 1) * p];
                for oh in 0..ho {
                    let ih = (oh * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * w..(ih as usize + 1) * w];
                    for ow in 0..wo {
                        let iw = (ow * stride + kj) as isize - pad as isize;
                        if iw >= 0 && iw < w as isize {
                            dst[iw as usize] += src[oh * wo + ow];
                        }
                    }
                }
            }
        }
    }
}
