use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up for the requested primitive.
    #[error("shape error: {0}")]
    Shape(String),
    /// A scalar argument is outside its legal range.
    #[error("invalid argument: {0}")]
    Argument(String),
    /// An operation was issued against an object in the wrong state.
    #[error("invalid state: {0}")]
    State(String),
    /// An internal structural invariant was violated.
    #[error("invariant violated: {0}")]
    Invariant(String),
    /// A genotype or architecture description is inconsistent.
    #[error("validation failed: {0}")]
    Validation(String),
    /// A binary or text input does not follow its expected layout.
    #[error("format error in {path}: {msg}")]
    Format { path: String, msg: String },
    /// A configuration field holds an unacceptable value.
    #[error("config error at `{field}`: {msg}")]
    Config { field: String, msg: String },
    /// A persisted artifact was written by an incompatible schema version.
    #[error("schema version mismatch for {artifact}: found {found}, expected {expected}; re-export the artifact with this version of the tool")]
    SchemaVersion {
        artifact: &'static str,
        found: u32,
        expected: u32,
    },
    /// Training diverged.
    #[error("non-finite loss {value} at exit {exit_index} (step {step})")]
    NonFinite {
        exit_index: usize,
        step: u64,
        value: f64,
    },
    /// An output directory already holds a finished run.
    #[error("refusing to overwrite completed run in {0}; choose a fresh --out-dir")]
    AlreadyComplete(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<S: Into<String>>(msg: S) -> Error {
    Error::Shape(msg.into())
}

pub(crate) fn arg_err<S: Into<String>>(msg: S) -> Error {
    Error::Argument(msg.into())
}
