//! Two-stage crowd counting: self-supervised colorization pretraining with a
//! global group-prior classification branch on unlabeled images, followed by
//! fine-tuning a density-map counting network on a small labeled subset.
//!
//! The crate is organized around the stages of that pipeline:
//!
//! - [`color_space`]: sRGB ↔ CIE Lab, splitting images into lightness
//!   (network input) and ab chroma (pseudo label).
//! - [`quantization`]: ab codebook, soft encoding into color distributions,
//!   annealed-mean decoding, class-rarity rebalancing.
//! - [`density`]: geometry-adaptive Gaussian density maps and the synthetic
//!   scene generator that stands in for web-scale crowd data.
//! - [`losses`]: every training objective with analytically verified
//!   gradients (colorization, GAN, cycle, texture, classification, counting).
//! - [`nn`] / [`networks`]: a small deterministic CPU autodiff engine and
//!   the concrete generator / discriminator / counting architectures.
//! - [`priors`]: ranking-, clustering-, and keyword-based group labels.
//! - [`pipeline`]: the two training stages, checkpointing, subset sampling.
//! - [`eval`]: MAE / MSE reports and visual artifact rendering.

pub mod color_space;
pub mod density;
pub mod error;
pub mod eval;
pub mod io;
pub mod losses;
pub mod networks;
pub mod nn;
pub mod pipeline;
pub mod priors;
pub mod quantization;

pub use error::{Error, Result};
