//! Error type shared across the crate.

use std::fmt;
use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by tensor ops, model code, and data handling.
#[derive(Debug)]
pub enum Error {
    /// Two operands have incompatible shapes; names the op and both shapes.
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// Invalid input value (non-finite landmark, empty dataset, bad threshold, ...).
    Input(String),
    /// An API contract was violated (non-scalar loss, missing gradient, ...).
    Contract(String),
    /// A numeric failure (non-finite values where finite ones are required).
    Numeric(String),
    /// A file failed to parse; carries the source location.
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    /// Structurally valid file with the wrong content (landmark count, attribute count).
    Format(String),
    /// Checkpoint/config mismatch; names both sides.
    Incompatible(String),
    /// Corrupt file detected by length or checksum.
    Integrity(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            Error::Input(msg) => write!(f, "invalid input: {msg}"),
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Error::Parse { path, line, msg } => {
                write!(f, "parse error in {} line {line}: {msg}", path.display())
            }
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Incompatible(msg) => write!(f, "incompatible: {msg}"),
            Error::Integrity(msg) => write!(f, "integrity error: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
