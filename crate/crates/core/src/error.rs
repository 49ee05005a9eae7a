use thiserror::Error;

/// Errors raised by the optimizer core.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A size computation overflowed or a length did not match.
    #[error("size error: {0}")]
    Size(String),

    /// An argument violated an operation's precondition.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A loss or gradient evaluation produced NaN or infinity.
    #[error("non-finite value: {0}")]
    Numeric(String),

    /// An API was used out of order (e.g. reading an unarmed ledger).
    #[error("usage error: {0}")]
    Usage(String),

    /// A dataset file could not be parsed. `row` is the 0-indexed data row.
    #[error("parse error at data row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("I/O error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
