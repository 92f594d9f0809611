//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by any rawcm component.
///
/// Variants are grouped by subsystem so the CLI can map each failure to a
/// stable one-line error class.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not satisfy an operation's contract.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An operation was called with an invalid argument or in an invalid state.
    #[error("invalid argument: {0}")]
    InvalidArg(String),

    /// Autograd API misuse (non-scalar backward, repeated backward, ...).
    #[error("autograd: {0}")]
    Autograd(String),

    /// WAV decoding rejected the file; `constraint` names the violated requirement.
    #[error("wav {path}: {constraint}")]
    WavFormat { path: String, constraint: String },

    /// A protocol or score line failed to parse.
    #[error("line {line}: {reason}")]
    ParseLine { line: usize, reason: String },

    /// Dataset does not meet a training/evaluation precondition.
    #[error("dataset: {0}")]
    Dataset(String),

    /// Metric computation was handed a degenerate input.
    #[error("metric: {0}")]
    Metric(String),

    /// Configuration file or value is invalid.
    #[error("config: {0}")]
    Config(String),

    /// Checkpoint or model file is corrupt or incompatible.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// Fusion inputs are inconsistent (misaligned ids, system count mismatch).
    #[error("fusion: {0}")]
    Fusion(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable machine-readable class used in CLI error lines.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::InvalidArg(_) => "invalid-arg",
            Error::Autograd(_) => "autograd",
            Error::WavFormat { .. } => "wav-format",
            Error::ParseLine { .. } => "parse",
            Error::Dataset(_) => "dataset",
            Error::Metric(_) => "metric",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::Fusion(_) => "fusion",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
