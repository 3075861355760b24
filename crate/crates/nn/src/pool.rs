use ndarray::{Array2, Array4};

/// Max pooling with implicit `-inf` padding.
#[derive(Debug, Clone)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    cache: Option<(Vec<usize>, (usize, usize, usize, usize))>,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self { kernel, stride, padding, cache: None }
    }

    pub fn output_size(&self, size: usize) -> usize {
        (size + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn run(&self, x: &Array4<f64>) -> (Array4<f64>, Vec<usize>) {
        let (n, c, h, w) = x.dim();
        let (ho, wo) = (self.output_size(h), self.output_size(w));
        let x = x.as_standard_layout();
        let xs = x.as_slice().unwrap();
        let mut y = Array4::zeros((n, c, ho, wo));
        let mut arg = Vec::with_capacity(n * c * ho * wo);
        for (plane_idx, out_plane) in y.as_slice_mut().unwrap().chunks_mut(ho * wo).enumerate() {
            let base = plane_idx * h * w;
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = base;
                    for ki in 0..self.kernel {
                        let ih = (oh * self.stride + ki) as isize - self.padding as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for kj in 0..self.kernel {
                            let iw = (ow * self.stride + kj) as isize - self.padding as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            let idx = base + ih as usize * w + iw as usize;
                            if xs[idx] > best {
                                best = xs[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out_plane[oh * wo + ow] = best;
                    arg.push(best_idx);
                }
            }
        }
        (y, arg)
    }

    pub fn infer(&self, x: &Array4<f64>) -> Array4<f64> {
        self.run(x).0
    }

    pub fn forward(&mut self, x: &Array4<f64>) -> Array4<f64> {
        let (y, arg) = self.run(x);
        self.cache = Some((arg, x.dim()));
        y
    }

    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let (arg, dim) = self.cache.take().expect("MaxPool2d::backward without forward");
        let mut dx = Array4::zeros(dim);
        let dxs = dx.as_slice_mut().unwrap();
        for (g, &idx) in dy.as_standard_layout().iter().zip(arg.iter()) {
            dxs[idx] += g;
        }
        dx
    }
}

/// Non-overlapping-or-strided average pooling without padding.
#[derive(Debug, Clone)]
pub struct AvgPool2d {
    pub kernel: usize,
    pub stride: usize,
    input_dim: Option<(usize, usize, usize, usize)>,
}

impl AvgPool2d {
    pub fn new(kernel: usize, stride: usize) -> Self {
        Self { kernel, stride, input_dim: None }
    }

    pub fn output_size(&self, size: usize) -> usize {
        (size - self.kernel) / self.stride + 1
    }

    pub fn infer(&self, x: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let (ho, wo) = (self.output_size(h), self.output_size(w));
        let norm = 1.0 / (self.kernel * self.kernel) as f64;
        Array4::from_shape_fn((n, c, ho, wo), |(b, ci, i, j)| {
            let mut acc = 0.0;
            for ki in 0..self.kernel {
                for kj in 0..self.kernel {
                    acc += x[[b, ci, i * self.stride + ki, j * self.stride + kj]];
                }
            }
            acc * norm
        })
    }

    pub fn forward(&mut self, x: &Array4<f64>) -> Array4<f64> {
        self.input_dim = Some(x.dim());
        self.infer(x)
    }

    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let dim = self.input_dim.take().expect("AvgPool2d::backward without forward");
        let mut dx = Array4::zeros(dim);
        let norm = 1.0 / (self.kernel * self.kernel) as f64;
        for ((b, ci, i, j), &g) in dy.indexed_iter() {
            for ki in 0..self.kernel {
                for kj in 0..self.kernel {
                    dx[[b, ci, i * self.stride + ki, j * self.stride + kj]] += g * norm;
                }
            }
        }
        dx
    }
}

/// Mean over the spatial axes: `(N, C, H, W) -> (N, C)`.
pub fn global_avg_pool(x: &Array4<f64>) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let area = (h * w) as f64;
    let x = x.as_standard_layout();
    let xs = x.as_slice().unwrap();
    Array2::from_shape_fn((n, c), |(b, ci)| {
        let start = (b * c + ci) * h * w;
        xs[start..start + h * w].iter().sum::<f64>() / area
    })
}

pub fn global_avg_pool_backward(dy: &Array2<f64>, h: usize, w: usize) -> Array4<f64> {
    let (n, c) = dy.dim();
    let area = (h * w) as f64;
    Array4::from_shape_fn((n, c, h, w), |(b, ci, _, _)| dy[[b, ci]] / area)
}
