use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = VregError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum VregError {
    #[error("gimbal lock: |theta_y| within 1e-6 of 90 degrees")]
    GimbalLock,

    #[error("degenerate affine transform after {attempts} attempts")]
    Degenerate { attempts: usize },

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("unknown phantom spec `{0}`")]
    UnknownSpec(String),

    #[error("state left the exploration bounds")]
    OutOfBounds,

    #[error("Q recursion exceeded {limit} steps")]
    DepthExceeded { limit: usize },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("no voxels selected by the saliency threshold")]
    EmptySelection,

    #[error("images do not overlap")]
    EmptyOverlap,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl VregError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        VregError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        VregError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
