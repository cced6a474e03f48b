//! Hyperbolic (Lorentz-model) alignment of image and brain-response embeddings.
//!
//! The crate is layered bottom-up:
//!
//! - [`manifold`]: exact hyperboloid geometry plus tape-recorded counterparts.
//! - [`autodiff`]: dense tensors with reverse-mode differentiation.
//! - [`layers`]: Lorentz linear, normalisation, attention, residual, MLP and
//!   MLR layers, with their Euclidean twins.
//! - [`model`]: per-subject tokenizers, shared encoder, image projector,
//!   centroid pooling and classifier.
//! - [`losses`], [`optim`]: training objectives and the hybrid optimizer.
//! - [`data`], [`eval`], [`train`]: synthetic data, metrics and the run harness.
//! - [`params`], [`checkpoint`]: named parameter store and its on-disk format.
//! - [`run`]: output directories for training runs and the ablation grid.
//! - [`checks`]: randomized gradient and manifold-residency suites.

pub mod autodiff;
pub mod checkpoint;
pub mod checks;
pub mod data;
pub mod error;
pub mod eval;
pub mod layers;
pub mod losses;
pub mod manifold;
pub mod model;
pub mod optim;
pub mod params;
pub mod run;
pub mod train;

pub use error::{Error, Result};
