//! Variance-tuned diffusion importance sampling.
//!
//! A variance-exploding diffusion sampler is turned into an importance
//! sampler by weighting whole trajectories, and its per-step proposal
//! covariances are tuned after training to maximise effective sample size.

pub mod equivariant;
pub mod error;
pub mod exec;
pub mod gaussian;
pub mod metrics;
pub mod optim;
pub mod pfode;
pub mod diffusion;
pub mod score;
pub mod targets;
pub mod tuner;
pub mod rng;
pub mod schedule;

pub use error::{Error, Result};
