//! Ordering shuffled sets by diffusing element positions.

pub mod adapters;
pub mod checkpoint;
pub mod config;
pub mod denoiser;
pub mod diffusion;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod task;
pub mod trainer;

pub use error::{Error, Result};
