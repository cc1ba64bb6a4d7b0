//! Open-set domain-adaptive semantic segmentation on a synthetic two-domain
//! benchmark, using a separate-then-adapt training strategy: a first stage
//! learns a (K+1)-class unknown detector from source images augmented with
//! randomly shaped, randomly colored "virtual unknown" regions, and a second
//! stage adapts to the target domain by mixing detected unknown pixels into
//! source images and refining the unknown masks with hard-unknown mining.
//!
//! The crate ships a library (rasters, augmentation algebra, pseudo-labeling
//! rules, a compact trainable segmentation network, training loops, and
//! IoU/H-Score metrics) plus a `sats` CLI that wires everything into
//! reproducible experiments.

pub mod augment;
pub mod datamodel;
pub mod metrics;
pub mod netcore;
pub mod pseudolabel;
pub mod seeds;
pub mod synthbench;
pub mod trainer;

pub mod cli;

use std::path::PathBuf;

/// Crate-wide error type. `Validation` covers bad configuration or bad input
/// data (CLI exit code 2); everything else is a runtime failure (exit code 1).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("{0}")]
    Runtime(String),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input rather than a failure at runtime.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Validation(_) | Error::DimensionMismatch(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
