//! Small neural-network building blocks with hand-written backward passes.
//!
//! Every layer works on `f64` tensors in NCHW (or `N x features`) layout and
//! keeps whatever it needs from the last training forward pass so that a
//! following `backward` call can produce input gradients and accumulate
//! parameter gradients. Layers also expose an `infer` path that borrows
//! immutably and caches nothing.
//!
//! Matrix products go through `ndarray`, which is single-threaded here, so
//! every result is bit-reproducible for a given input.

pub mod activation;
pub mod conv;
pub mod init;
pub mod linear;
pub mod norm;
pub mod optim;
pub mod param;
pub mod pool;

pub use activation::{Dropout, Relu};
pub use conv::Conv2d;
pub use linear::Linear;
pub use norm::{BatchNorm1d, BatchNorm2d};
pub use optim::{Adam, AdamConfig, Sgd, SgdConfig};
pub use param::{zero_grads, Module, Param, ParamKind};
pub use pool::{global_avg_pool, global_avg_pool_backward, AvgPool2d, MaxPool2d};

/// Whether a forward pass is part of training.
///
/// Controls batch-statistics vs running-statistics normalization and whether
/// dropout is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    pub fn is_train(self) -> bool {
        self == Mode::Train
    }
}
