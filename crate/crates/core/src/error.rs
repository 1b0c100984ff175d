//! Crate-wide error type.

use std::fmt;

#[derive(Debug)]
pub enum Error {
    /// Tensor extents disagree with an operation's contract.
    Shape(String),
    /// A documented operation produced a non-finite value.
    Numeric(String),
    /// A caller violated an operation precondition.
    Contract(String),
    /// A softmax row had every entry masked out.
    InvalidMask(String),
    /// A degenerate input (e.g. a zero-norm vector) where a direction is required.
    DegenerateInput(String),
    /// A sequence exceeds a fixed capacity such as the positional table.
    Capacity(String),
    /// A tensor file is malformed (bad magic, truncated payload, unsupported rank).
    Format(String),
    /// A manifest is inconsistent with the tensor files it references.
    Manifest(String),
    NotFound(String),
    /// A run configuration violates its invariants.
    Validation(String),
    /// A runtime configuration conflict (e.g. inter-negatives without batch peers).
    Config(String),
    Io(std::io::Error),
    Json(serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
            Error::Contract(m) => write!(f, "contract error: {m}"),
            Error::InvalidMask(m) => write!(f, "invalid mask: {m}"),
            Error::DegenerateInput(m) => write!(f, "degenerate input: {m}"),
            Error::Capacity(m) => write!(f, "capacity error: {m}"),
            Error::Format(m) => write!(f, "format error: {m}"),
            Error::Manifest(m) => write!(f, "manifest error: {m}"),
            Error::NotFound(m) => write!(f, "not found: {m}"),
            Error::Validation(m) => write!(f, "validation error: {m}"),
            Error::Config(m) => write!(f, "configuration error: {m}"),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Json(e) => write!(f, "json error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            Error::Json(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}
