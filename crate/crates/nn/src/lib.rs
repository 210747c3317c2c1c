//! Minimal deterministic CPU autograd for small convolutional GANs.
//!
//! Tensors are `ndarray` arrays in NCHW layout. Matrix products go through
//! `ndarray`'s single-threaded GEMM, so results are bitwise reproducible
//! run to run.

pub mod conv;
pub mod optim;
pub mod params;
mod scalar;
pub mod tape;

pub use optim::{Adam, AdamConfig};
pub use params::{BatchNorm, Conv2d, Ctx, Entry, Kind, Linear, Mode, Params, BN_MOMENTUM, INIT_STD};
pub use scalar::Float;
pub use tape::{sigmoid, BnObservation, Gradients, Tape, Var};

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("shape error: {0}")]
    Shape(String),
}
