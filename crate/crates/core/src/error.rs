use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("singular matrix: {0}")]
    Singular(&'static str),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("tape is not topologically ordered: node {node} reads node {input}")]
    Cycle { node: usize, input: usize },

    #[error("unknown view index {0}")]
    MissingView(usize),

    #[error("object placement failed after {0} attempts")]
    Placement(usize),

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("dataset config hash {found} does not match expected {expected}")]
    HashMismatch { expected: String, found: String },

    #[error("output directory {0} is not empty (use --force to overwrite)")]
    NotEmpty(PathBuf),

    #[error("malformed file {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
