use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("index {index} out of range for dimension {dim} (size {size})")]
    IndexOutOfRange {
        dim: usize,
        index: usize,
        size: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("model format: {0}")]
    Format(String),

    #[error(
        "context mismatch: model expects {expected} context states, assigner provides {found}"
    )]
    ContextMismatch { expected: String, found: String },

    #[error("unknown {kind} '{key}'")]
    UnknownEntity { kind: &'static str, key: String },

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("numerical failure in dimension {dim}, column {column}: {message}")]
    Numerical {
        dim: usize,
        column: usize,
        message: String,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for failures caused by non-finite or singular arithmetic.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical { .. } | Error::NotPositiveDefinite)
    }
}
