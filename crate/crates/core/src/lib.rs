//! Recovery of a target image from a multi-target detection (MTD)
//! measurement by autocorrelation analysis, optionally regularized by a
//! score-based prior, in both the standard and the super-resolution setting.
//!
//! The pipeline:
//!
//! 1. [`forward`] plants well-separated copies of a target in a large noisy
//!    frame (or down-sampled copies, for super-resolution).
//! 2. [`autocorr`] reduces the measurement to its autocorrelations up to
//!    third order, streaming the frame strip by strip.
//! 3. [`moments`] relates those to the autocorrelations of a candidate image
//!    through the density `γ` and the noise bias, and provides the moment loss.
//! 4. [`optimizer`] minimizes the loss with Nesterov momentum, mixing in a
//!    [`score`] prior whose weight adapts to the data gradient.
//!
//! The image-side math is generic over [`Scalar`] (`f32`/`f64`); the aliases
//! below fix it to `f64`, which is what the CLI uses.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autocorr;
pub mod error;
pub mod forward;
pub mod image;
pub mod moments;
pub mod optimizer;
pub mod rng;
pub mod scalar;
pub mod score;
pub mod sweep;

pub use crate::error::{MtdError, Result};
pub use crate::scalar::Scalar;

pub type Image64 = image::Image<f64>;
pub type Image32 = image::Image<f32>;
pub type AutocorrSet64 = autocorr::AutocorrSet<f64>;
pub type MomentSystem64 = moments::MomentSystem<f64>;
pub type ScoreProvider64 = score::ScoreProvider<f64>;
pub type RecoveryConfig64 = optimizer::RecoveryConfig<f64>;
pub type RecoveryResult64 = optimizer::RecoveryResult<f64>;
pub type Measurement32 = forward::Measurement<f32>;
pub type Measurement64 = forward::Measurement<f64>;
