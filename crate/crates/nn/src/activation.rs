use ndarray::{Array, Dimension};
use rand::Rng;

use crate::Mode;

/// Rectified linear unit with a cached positivity mask.
#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn infer<D: Dimension>(x: &Array<f64, D>) -> Array<f64, D> {
        x.mapv(|v| v.max(0.0))
    }

    pub fn forward<D: Dimension>(&mut self, x: &Array<f64, D>) -> Array<f64, D> {
        self.mask = Some(x.iter().map(|&v| v > 0.0).collect());
        Self::infer(x)
    }

    pub fn backward<D: Dimension>(&mut self, dy: &Array<f64, D>) -> Array<f64, D> {
        let mask = self.mask.take().expect("Relu::backward without forward");
        let mut dx = dy.as_standard_layout().into_owned();
        for (g, &keep) in dx.iter_mut().zip(mask.iter()) {
            if !keep {
                *g = 0.0;
            }
        }
        dx
    }
}

/// Inverted dropout: surviving activations are scaled by `1 / (1 - rate)`.
#[derive(Debug, Clone)]
pub struct Dropout {
    pub rate: f64,
    scale: Option<Vec<f64>>,
}

impl Dropout {
    pub fn new(rate: f64) -> Self {
        assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0, 1)");
        Self { rate, scale: None }
    }

    pub fn forward<D: Dimension, R: Rng + ?Sized>(&mut self, x: &Array<f64, D>, mode: Mode, rng: &mut R) -> Array<f64, D> {
        if !mode.is_train() || self.rate == 0.0 {
            self.scale = None;
            return x.clone();
        }
        let keep = 1.0 / (1.0 - self.rate);
        let scale: Vec<f64> = (0..x.len())
            .map(|_| if rng.random::<f64>() < self.rate { 0.0 } else { keep })
            .collect();
        let mut y = x.as_standard_layout().into_owned();
        for (v, s) in y.iter_mut().zip(scale.iter()) {
            *v *= s;
        }
        self.scale = Some(scale);
        y
    }

    pub fn backward<D: Dimension>(&mut self, dy: &Array<f64, D>) -> Array<f64, D> {
        match self.scale.take() {
            None => dy.clone(),
            Some(scale) => {
                let mut dx = dy.as_standard_layout().into_owned();
                for (g, s) in dx.iter_mut().zip(scale.iter()) {
                    *g *= s;
                }
                dx
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn relu_masks_gradient() {
        let mut r = Relu::new();
        let y = r.forward(&array![-1.0, 0.0, 2.0]);
        assert_eq!(y, array![0.0, 0.0, 2.0]);
        assert_eq!(r.backward(&array![1.0, 1.0, 1.0]), array![0.0, 0.0, 1.0]);
    }

    #[test]
    fn dropout_is_identity_in_eval() {
        let mut d = Dropout::new(0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = array![[1.0, 2.0], [3.0, 4.0]];
        assert_eq!(d.forward(&x, Mode::Eval, &mut rng), x);
        assert_eq!(d.backward(&x), x);
    }

    #[test]
    fn dropout_train_zeroes_or_scales() {
        let mut d = Dropout::new(0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = ndarray::Array1::<f64>::ones(1000);
        let y = d.forward(&x, Mode::Train, &mut rng);
        assert!(y.iter().all(|&v| v == 0.0 || v == 2.0));
        let kept = y.iter().filter(|&&v| v > 0.0).count();
        assert!((400..600).contains(&kept));
        let g = d.backward(&x);
        assert_eq!(g, y);
    }
}
