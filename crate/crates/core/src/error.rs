//! Crate-wide error type.
//!
//! Every fallible operation returns [`CueError`]. The variants map onto the
//! stable machine-readable codes the CLI prints on failure, so new variants
//! need a new code string, never a reused one.

use std::fmt;

/// Alias used throughout the crate.
pub type Result<T> = std::result::Result<T, CueError>;

#[derive(Debug)]
pub enum CueError {
    /// Tensor shape or dimension mismatch.
    Shape(String),
    /// Invalid configuration or precondition violation.
    Config(String),
    /// NaN/Inf detected, or a numerically impossible request.
    Numeric(String),
    /// Malformed data: manifests, tensor files, checkpoints.
    Data(String),
    /// Filesystem failure, with the path that caused it.
    Io(String, std::io::Error),
}

impl CueError {
    /// Stable single-token code, used by the CLI for machine-parsable errors.
    pub fn code(&self) -> &'static str {
        match self {
            CueError::Shape(_) => "shape",
            CueError::Config(_) => "config",
            CueError::Numeric(_) => "numeric",
            CueError::Data(_) => "data",
            CueError::Io(_, _) => "io",
        }
    }

    /// Attaches a path to an I/O error.
    pub fn io(path: impl AsRef<std::path::Path>, err: std::io::Error) -> Self {
        CueError::Io(path.as_ref().display().to_string(), err)
    }
}

impl fmt::Display for CueError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CueError::Shape(msg) => write!(f, "shape error: {msg}"),
            CueError::Config(msg) => write!(f, "config error: {msg}"),
            CueError::Numeric(msg) => write!(f, "numeric error: {msg}"),
            CueError::Data(msg) => write!(f, "data error: {msg}"),
            CueError::Io(path, err) => write!(f, "io error at {path}: {err}"),
        }
    }
}

impl std::error::Error for CueError {}

impl From<serde_json::Error> for CueError {
    fn from(err: serde_json::Error) -> Self {
        CueError::Data(format!("json: {err}"))
    }
}
