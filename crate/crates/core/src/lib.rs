//! Continual learning by Douglas-Rachford splitting.
//!
//! Training on each task alternates a task-fitting proximal step over the
//! whole encoder/decoder with a prior-alignment proximal step on the encoder
//! alone, where alignment is a weighted Rényi divergence between the
//! dataset-level latent posterior and the prior propagated from the previous
//! task.

pub mod diffcore;
pub mod divergences;
pub mod drs;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod tasks;

pub use error::{Error, Result};
