//! Trainable product-video captioner: a spatial-temporal part graph encoder
//! with aspect filtering and memory attention, a GRU attention decoder, an
//! evaluation suite, and a synthetic-data harness, all on a small f64
//! reverse-mode autodiff core.

pub mod autodiff;
pub mod cli;
pub mod dataio;
pub mod decoder;
pub mod encoder;
pub mod gradcheck;
pub mod kvconfig;
pub mod metrics;
pub mod model;
pub mod params;
pub mod training;
pub mod vidgraph;

use thiserror::Error;

/// Errors raised while running the model forward or backward.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] autodiff::AdError),
    #[error("graph structure: {0}")]
    Structure(String),
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error("unknown variant `{0}` (expected poet, poet-kl, gcn, or gcn+kl)")]
    UnknownVariant(String),
    #[error("invalid caption: {0}")]
    Caption(String),
    #[error("invalid decode request: {0}")]
    Decode(String),
}
