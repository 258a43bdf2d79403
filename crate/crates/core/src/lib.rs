//! Content/style disentanglement with domain-style contrastive learning and
//! style augmentation for domain-generalisable segmentation.
//!
//! The numerical core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision used for training and for gradient checks.

pub mod checkpoint;
pub mod config;
pub mod datagen;
mod error;
pub mod imaging;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod styleaug;
pub mod trainer;

pub use cddsa_autograd::{Scalar, Tensor};
pub use error::{CddsaError, Result};

/// Single-precision model used for training and inference.
pub type Net32 = model::CddsaNet<f32>;
/// Double-precision model used for finite-difference checks.
pub type Net64 = model::CddsaNet<f64>;
pub type Dataset32 = datagen::MultiDomainDataset<f32>;
pub type Dataset64 = datagen::MultiDomainDataset<f64>;
