//! Crate-wide error type.
//!
//! Every fallible public operation returns [`Result`]. Contract violations
//! (bad shapes, non-finite numbers, inconsistent configuration) are reported
//! as structured variants so callers and tests can match on them.

use thiserror::Error;

/// Errors produced by the amalgam crate.
#[derive(Debug, Error)]
pub enum Error {
    /// An input tensor had an unexpected shape.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        /// Operation that rejected the input.
        context: &'static str,
        /// Human-readable description of the expected shape.
        expected: String,
        /// Human-readable description of the offending shape.
        got: String,
    },

    /// An input contained NaN or infinity.
    #[error("non-finite values in {context}")]
    NonFinite {
        /// Operation that rejected the input.
        context: &'static str,
    },

    /// Invalid or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),

    /// A dataset file is missing, malformed, or fails integrity checks.
    #[error("dataset error: {0}")]
    Dataset(String),

    /// A checkpoint file is malformed or incompatible with the model config.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training aborted because the loss became non-finite.
    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged {
        /// Epoch at which the divergence was detected.
        epoch: usize,
        /// Which loss term went non-finite and its last finite value.
        detail: String,
    },

    /// A rollout produced a non-finite prediction and was aborted.
    #[error("rollout aborted at step {step}: {detail}")]
    RolloutAborted {
        /// Timestep at which the rollout became invalid.
        step: usize,
        /// Description of the offending quantity.
        detail: String,
    },

    /// Requested analysis inputs are missing (e.g. incomplete ablation grid).
    #[error("analysis error: {0}")]
    Analysis(String),

    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// JSON (de)serialization failure.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
