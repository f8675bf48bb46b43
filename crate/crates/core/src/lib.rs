//! Test-time constrained optimization of a toy multiview network.
//!
//! A [`model::ToyMvt`] predicts per-view depth, confidence, pose and focal
//! length. [`optim::run_tco`] adapts LoRA factors of its decoder so that the
//! predictions agree with known priors and with each other, where agreement
//! is measured by rendering one view's 2D Gaussian splats into the others.

pub mod compat;
pub mod error;
pub mod geometry;
pub mod model;
pub mod optim;
pub mod predictions;
pub mod priors;
pub mod render;
pub mod splat;

pub use error::{Error, Result};
