//! Shared error type for the srt2 core crate.

use std::fmt;
use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// An argument violates a documented precondition.
    InvalidArgument(String),
    /// Two volumes or operators do not live on the same grid.
    GridMismatch(String),
    /// A file does not conform to the expected format; names the offending field.
    Format { field: String, detail: String },
    Io { path: PathBuf, source: std::io::Error },
    /// An iterative method produced non-finite values.
    Numeric { iteration: usize, detail: String },
    /// ROI detection found fewer structures than requested.
    DetectionFailure { found: usize, expected: usize },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::GridMismatch(msg) => write!(f, "grid mismatch: {msg}"),
            Error::Format { field, detail } => write!(f, "format error in field `{field}`: {detail}"),
            Error::Io { path, source } => write!(f, "I/O error on {}: {source}", path.display()),
            Error::Numeric { iteration, detail } => {
                write!(f, "numeric failure at iteration {iteration}: {detail}")
            }
            Error::DetectionFailure { found, expected } => {
                write!(f, "detection failure: found {found} of {expected} expected circles")
            }
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
