//! Conditional diffusion replicas of multi-label image corpora, and the
//! machinery to measure how synthetic supplementation changes downstream
//! classifier performance.
//!
//! Numeric code is generic over [`Scalar`]; the aliases below fix the
//! precision used by the training pipeline (`f32`) and by the gradient and
//! oracle checks (`f64`).

pub mod classifier;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod harness;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod schedule;
pub mod tensor;
pub mod toydata;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Denoiser32 = denoiser::Denoiser<f32>;
pub type Denoiser64 = denoiser::Denoiser<f64>;
pub type Image32 = tensor::Image<f32>;
pub type Image64 = tensor::Image<f64>;
