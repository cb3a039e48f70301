//! Error types shared across the crate.

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller-supplied value violates a precondition (dimension mismatch,
    /// out-of-range label, non-finite input, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A numerical routine failed beyond recovery (Cholesky breakdown after
    /// jitter escalation, non-finite objective).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A text input could not be parsed; `line` is 1-based.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}
