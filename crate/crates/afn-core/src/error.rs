use std::path::PathBuf;

/// Errors produced by the feature pipeline, tensor engine, model, trainer
/// and scoring components.
#[derive(Debug, thiserror::Error)]
pub enum AfnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("audio error: {0}")]
    Audio(String),

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("gradient check failed: worst relative error {worst:.3e} exceeds tolerance {tolerance:.1e}")]
    GradCheckFailed { worst: f64, tolerance: f64 },

    #[error("optimizer did not converge: {0}")]
    NoConvergence(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AfnError>;
