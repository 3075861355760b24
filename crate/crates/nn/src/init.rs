use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// He-normal initialization for a layer with `fan_in` inputs feeding a ReLU.
pub fn kaiming_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> ArrayD<f64> {
    normal(shape, (2.0 / fan_in.max(1) as f64).sqrt(), rng)
}

pub fn normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    if std == 0.0 {
        return ArrayD::zeros(IxDyn(shape));
    }
    let dist = Normal::new(0.0, std).expect("finite std");
    let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape matches length")
}
