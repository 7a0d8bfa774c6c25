//! Factorized text-to-video generation in a closed shape world.
//!
//! The pipeline has three stages: a prompt is reduced to its first-frame
//! description ([`prompt`]), that description is rendered into an anchor
//! image ([`scene`]), and an anchor-grounded velocity model fills in the
//! remaining frames ([`model`], [`train`], [`sample`]). [`metrics`] scores
//! the results with exact probes and Fréchet feature distances.

pub mod container;
pub mod error;
pub mod metrics;
pub mod model;
pub mod prompt;
pub mod rng;
pub mod sample;
pub mod scene;
pub mod train;

pub use error::{Error, Result};
