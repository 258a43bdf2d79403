//! Reverse-mode automatic differentiation over dense NCHW tensors.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`); training runs in
//! `f32` while gradient checks run the same code in `f64`.

pub mod broadcast;
mod error;
pub mod gradcheck;
pub mod kernels;
pub mod nn;
pub mod optim;
pub mod params;
mod scalar;
pub mod tape;
mod tensor;

pub use error::{Error, Result};
pub use optim::Adam;
pub use params::{apply_stat_updates, Binder, Mode, Param, ParamId, ParamStore, StatUpdate};
pub use scalar::{matmul_into, Scalar};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{numel, strides, Tensor};
