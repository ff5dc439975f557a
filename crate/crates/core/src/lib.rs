//! Pre-inference membership-privacy defense built on diffusion reconstruction.
//!
//! Inputs are noised with the closed-form forward process, denoised with a
//! strided deterministic sampler, and the classifier's prediction on one of
//! several label-preserving reconstructions is released instead of the
//! prediction on the raw input. The crate also carries the black-box
//! membership-inference attacks and metrics used to measure the effect.
//!
//! Module map:
//! - [`data`]: datasets, synthetic generator, member/non-member splits
//! - [`classifier`]: the target model `f` and its prediction vectors
//! - [`diffusion`]: noise schedule, denoiser, forward noising, reconstruction
//! - [`defense`]: logit modeling, candidate filtering, interval fitting, selection
//! - [`attacks`]: gap, metric, NN-based and likelihood-ratio attacks
//! - [`metrics`]: ROC/AUC, low-FPR rates, histograms, JS divergence

pub mod attacks;
pub mod classifier;
pub mod data;
pub mod defense;
pub mod diffusion;
mod error;
pub mod metrics;
pub mod nn;
pub mod seed;

pub use error::{Error, Result};
