//! Square-ring partition of a square feature map.
//!
//! Part `l` (1-based, innermost first) is the annulus between the centered
//! squares of side `(l-1)·H/R` and `l·H/R`, where `R` is the number of rings.
//! Each part is average-pooled into one channel vector.

use ndarray::{Array2, Array4};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RingPartition {
    size: usize,
    num_rings: usize,
    ring_of: Vec<usize>,
    counts: Vec<usize>,
}

impl RingPartition {
    pub fn new(size: usize, num_rings: usize) -> Result<Self> {
        if num_rings == 0 || size == 0 || size % (2 * num_rings) != 0 {
            return Err(Error::Config(format!(
                "feature map side {size} is not divisible by 2 x {num_rings} rings"
            )));
        }
        let step = size / num_rings;
        let mut ring_of = Vec::with_capacity(size * size);
        let mut counts = vec![0; num_rings];
        for i in 0..size {
            for j in 0..size {
                // doubled distance from the center to the cell center: odd, in 1..size-1
                let di = (2 * i + 1).abs_diff(size);
                let dj = (2 * j + 1).abs_diff(size);
                // the cell lies in the centered square of side s iff max(di, dj) < s
                let ring = di.max(dj) / step;
                ring_of.push(ring);
                counts[ring] += 1;
            }
        }
        Ok(Self { size, num_rings, ring_of, counts })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn num_rings(&self) -> usize {
        self.num_rings
    }

    /// Number of cells in each ring, innermost first.
    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// 0-based ring index of cell `(row, col)`.
    pub fn ring_of(&self, row: usize, col: usize) -> usize {
        self.ring_of[row * self.size + col]
    }

    fn check(&self, h: usize, w: usize) -> Result<()> {
        if h != self.size || w != self.size {
            return Err(Error::Shape(format!(
                "feature maps are {h}x{w}, partition expects {0}x{0}",
                self.size
            )));
        }
        Ok(())
    }

    /// `(N, C, H, W)` maps to one `(N, C)` matrix per ring.
    pub fn pool(&self, maps: &Array4<f64>) -> Result<Vec<Array2<f64>>> {
        let (n, c, h, w) = maps.dim();
        self.check(h, w)?;
        let maps = maps.as_standard_layout();
        let xs = maps.as_slice().unwrap();
        let mut out: Vec<Array2<f64>> = (0..self.num_rings).map(|_| Array2::zeros((n, c))).collect();
        let area = h * w;
        for b in 0..n {
            for ch in 0..c {
                let plane = &xs[(b * c + ch) * area..(b * c + ch + 1) * area];
                let mut sums = vec![0.0; self.num_rings];
                for (v, &r) in plane.iter().zip(&self.ring_of) {
                    sums[r] += v;
                }
                for r in 0..self.num_rings {
                    out[r][[b, ch]] = sums[r] / self.counts[r] as f64;
                }
            }
        }
        Ok(out)
    }

    /// Gradient of `pool` with respect to the maps.
    pub fn backward(&self, grads: &[Array2<f64>]) -> Array4<f64> {
        let (n, c) = grads[0].dim();
        let s = self.size;
        let mut dx = Array4::zeros((n, c, s, s));
        let dxs = dx.as_slice_mut().unwrap();
        for b in 0..n {
            for ch in 0..c {
                let scaled: Vec<f64> = (0..self.num_rings).map(|r| grads[r][[b, ch]] / self.counts[r] as f64).collect();
                let plane = &mut dxs[(b * c + ch) * s * s..(b * c + ch + 1) * s * s];
                for (v, &r) in plane.iter_mut().zip(&self.ring_of) {
                    *v = scaled[r];
                }
            }
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ring_counts_at_sixteen() {
        let p = RingPartition::new(16, 4).unwrap();
        // nested squares of side 4, 8, 12, 16: 16, 64-16, 144-64, 256-144
        assert_eq!(p.counts(), &[16, 48, 80, 112]);
        assert_eq!(p.counts().iter().sum::<usize>(), 256);
        assert_eq!(p.ring_of(7, 8), 0);
        assert_eq!(p.ring_of(0, 0), 3);
        assert_eq!(p.ring_of(5, 9), 1);
    }

    #[test]
    fn indivisible_size_is_rejected() {
        assert!(RingPartition::new(12, 4).is_err());
        assert!(RingPartition::new(15, 4).is_err());
        assert!(RingPartition::new(8, 4).is_ok());
    }

    #[test]
    fn constant_maps_pool_to_the_constant() {
        let p = RingPartition::new(16, 4).unwrap();
        let maps = Array4::from_shape_fn((2, 3, 16, 16), |(_, c, _, _)| c as f64 - 0.5);
        for part in p.pool(&maps).unwrap() {
            for ((_, c), v) in part.indexed_iter() {
                assert_eq!(*v, c as f64 - 0.5);
            }
        }
    }

    #[test]
    fn backward_is_adjoint_of_pool() {
        let p = RingPartition::new(8, 4).unwrap();
        let maps = Array4::from_shape_fn((1, 2, 8, 8), |(_, c, i, j)| ((c * 64 + i * 8 + j) as f64).sin());
        let grads: Vec<Array2<f64>> = (0..4).map(|r| Array2::from_elem((1, 2), r as f64 + 1.0)).collect();
        let lhs: f64 = p.pool(&maps).unwrap().iter().zip(&grads).map(|(a, g)| (a * g).sum()).sum();
        let rhs = (p.backward(&grads) * &maps).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn rings_tile_the_grid_and_follow_nested_squares(k in 1usize..=4) {
            let size = 8 * k;
            let p = RingPartition::new(size, 4).unwrap();
            prop_assert_eq!(p.counts().iter().sum::<usize>(), size * size);
            for l in 1..=4usize {
                let outer = l * size / 4;
                let inner = (l - 1) * size / 4;
                prop_assert_eq!(p.counts()[l - 1], outer * outer - inner * inner);
            }
            // rotation by 90 degrees maps every ring onto itself
            for i in 0..size {
                for j in 0..size {
                    prop_assert_eq!(p.ring_of(i, j), p.ring_of(j, size - 1 - i));
                    prop_assert_eq!(p.ring_of(i, j), p.ring_of(i, size - 1 - j));
                }
            }
        }
    }
}
