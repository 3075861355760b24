use ndarray::{ArrayD, IxDyn};

/// Trainable weights are updated by optimizers; buffers (running statistics)
/// are only serialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
    pub kind: ParamKind,
}

impl Param {
    pub fn new(value: ArrayD<f64>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self { value, grad, kind: ParamKind::Trainable }
    }

    pub fn buffer(value: ArrayD<f64>) -> Self {
        // Buffers never receive gradients; keep the grad slot empty.
        Self { value, grad: ArrayD::zeros(IxDyn(&[0])), kind: ParamKind::Buffer }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn is_trainable(&self) -> bool {
        self.kind == ParamKind::Trainable
    }

    pub fn zero_grad(&mut self) {
        if self.is_trainable() {
            self.grad.fill(0.0);
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Anything that owns parameters.
///
/// `visit_params` must enumerate parameters in a fixed order and give each
/// one a stable dotted path (`prefix.name`), which checkpoints and optimizer
/// state are keyed on.
pub trait Module {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn zero_grads(module: &mut dyn Module) {
    module.visit_params("", &mut |_, p| p.zero_grad());
}

/// Number of trainable scalars.
pub fn count_trainable(module: &mut dyn Module) -> usize {
    let mut n = 0;
    module.visit_params("", &mut |_, p| {
        if p.is_trainable() {
            n += p.len();
        }
    });
    n
}
