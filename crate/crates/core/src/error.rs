//! Error type shared by all modules.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("grid mismatch: expected dims {expected:?}, got {got:?}")]
    GridMismatch {
        expected: [usize; 3],
        got: [usize; 3],
    },

    #[error("deformation folds over at voxel {voxel:?} (jacobian determinant {det})")]
    Foldover { voxel: [usize; 3], det: f64 },

    #[error("matrix not positive definite after {attempts} jitter attempts")]
    NotPositiveDefinite { attempts: usize },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("{0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
        }
    }
}
