//! Crate-wide error type.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// An argument violated a precondition (bad index, empty input, ...).
    InvalidArgument(String),
    /// A model or weighting parameter is outside its valid domain.
    InvalidParameter(String),
    /// Shapes of two inputs do not line up.
    DimensionMismatch(String),
    /// A requested capability is not supported (e.g. differentiating
    /// angular bin centers on mesh domains).
    Unsupported(String),
    /// A numerical routine failed after its retries (Cholesky, ...).
    Numerical(String),
    /// The optimizer produced a non-finite loss.
    Divergence { step: usize, message: String },
    /// A file did not match its expected format.
    Format(String),
    /// A cache file does not match the configuration that requested it.
    StaleCache(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::InvalidParameter(msg) => write!(f, "invalid parameter: {msg}"),
            Error::DimensionMismatch(msg) => write!(f, "dimension mismatch: {msg}"),
            Error::Unsupported(msg) => write!(f, "unsupported: {msg}"),
            Error::Numerical(msg) => write!(f, "numerical failure: {msg}"),
            Error::Divergence { step, message } => {
                write!(f, "divergence at step {step}: {message}")
            }
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::StaleCache(msg) => write!(f, "stale cache: {msg}"),
            Error::Io(err) => write!(f, "io error: {err}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err)
    }
}
