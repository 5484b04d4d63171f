use std::io;

use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on shapes, counts or ranges was violated.
    #[error("contract violation: {0}")]
    Contract(String),
    /// Input is well-formed but mathematically degenerate (e.g. zero-norm vector).
    #[error("degenerate input: {0}")]
    Degenerate(String),
    /// The requested configuration has no implementation (e.g. multi-step SOMAML).
    #[error("unsupported configuration: {0}")]
    Unsupported(String),
    /// A computation produced NaN or infinity.
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("format error: {0}")]
    Format(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

pub(crate) fn config_err(field: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Config { field: field.into(), message: message.into() }
}
