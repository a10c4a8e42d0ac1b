//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes of the operands do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A precondition or input-validation failure.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// A text file failed to parse.
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A file passed syntactic parsing but failed an integrity check.
    #[error("corrupt file {path}: {msg}")]
    Corrupt { path: String, msg: String },

    /// The joint system cannot be solved on the positive-definite path.
    #[error("joint system is not positive definite (smallest eigenvalue {eig_min:.6e})")]
    NotPositiveDefinite { eig_min: f64 },

    /// Divergence, overflow, or a failed factorization.
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
