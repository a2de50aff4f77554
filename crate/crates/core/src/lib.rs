//! Prior-ratio guidance for score-based simulation-based inference.
//!
//! A score model trained under one parameter prior is steered at sampling
//! time toward the posterior under a different prior, by expressing the prior
//! ratio as a generalized Gaussian mixture and adding a closed-form guidance
//! term to the reverse-SDE score.

pub mod error;
pub mod experiment;
pub mod groundtruth;
pub mod guidance;
pub mod metrics;
pub mod prior;
pub mod sampler;
pub mod schedule;
pub mod score;
pub mod simulators;
pub mod util;

pub use error::{Error, Result};
