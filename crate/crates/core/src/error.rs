// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by model loading, forward passes, extraction, and scoring.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Model configuration violates a structural invariant.
    #[error("invalid model config: {0}")]
    Config(String),

    /// A weight tensor is missing or has the wrong shape.
    #[error("weight `{name}`: {reason}")]
    Weight { name: String, reason: String },

    /// Sequence or vector dimensions disagree.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A NaN or infinity showed up during a forward pass.
    #[error("non-finite activation at {site} (layer {layer})")]
    NonFinite { site: String, layer: usize },

    /// A site string or site index is not valid for the model.
    #[error("invalid site: {0}")]
    Site(String),

    /// Token sequence is empty or exceeds the context window.
    #[error("invalid sequence: {0}")]
    Sequence(String),

    /// Persona file violates its schema invariants.
    #[error("invalid persona: {0}")]
    Persona(String),

    /// An activation bank or vector set lacks data for a requested site.
    #[error("missing data: {0}")]
    Missing(String),

    /// Experiment parameters are inconsistent.
    #[error("invalid argument: {0}")]
    Invalid(String),

    /// The judge could not produce a score.
    #[error("judge failure for sample {sample}: {reason}")]
    Judge { sample: String, reason: String },

    /// Frontier scoring has no admissible coherency range.
    #[error("envelope scoring: {0}")]
    Envelope(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
