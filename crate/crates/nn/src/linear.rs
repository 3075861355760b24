use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Axis, Ix2};
use rand::Rng;

use crate::init::normal;
use crate::param::{join, Module, Param};
use crate::Mode;

/// Fully connected layer, `y = x W^T + b`, weight shaped `(out, in)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    pub in_features: usize,
    pub out_features: usize,
    input: Option<Array2<f64>>,
}

impl Linear {
    /// Weights drawn from N(0, std^2); bias zero.
    pub fn with_std<R: Rng + ?Sized>(in_features: usize, out_features: usize, std: f64, rng: &mut R) -> Self {
        Self {
            weight: Param::new(normal(&[out_features, in_features], std, rng)),
            bias: Param::zeros(&[out_features]),
            in_features,
            out_features,
            input: None,
        }
    }

    /// He-normal weights (fan-in).
    pub fn new<R: Rng + ?Sized>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        Self::with_std(in_features, out_features, (2.0 / in_features as f64).sqrt(), rng)
    }

    fn w(&self) -> ndarray::ArrayView2<'_, f64> {
        self.weight.value.view().into_dimensionality::<Ix2>().expect("2-D weight")
    }

    pub fn infer(&self, x: &Array2<f64>) -> Array2<f64> {
        assert_eq!(x.ncols(), self.in_features, "linear input width mismatch");
        let mut y = Array2::zeros((x.nrows(), self.out_features));
        general_mat_mul(1.0, x, &self.w().t(), 0.0, &mut y);
        let b = self.bias.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        y += &b;
        y
    }

    pub fn forward(&mut self, x: &Array2<f64>, _mode: Mode) -> Array2<f64> {
        let y = self.infer(x);
        self.input = Some(x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Array2<f64>) -> Array2<f64> {
        let x = self.input.take().expect("Linear::backward without forward");
        {
            let mut gw = self.weight.grad.view_mut().into_dimensionality::<Ix2>().unwrap();
            general_mat_mul(1.0, &dy.t(), &x, 1.0, &mut gw);
        }
        {
            let mut gb = self.bias.grad.view_mut().into_dimensionality::<ndarray::Ix1>().unwrap();
            gb += &dy.sum_axis(Axis(0));
        }
        dy.dot(&self.w())
    }
}

impl Module for Linear {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}
