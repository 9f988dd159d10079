//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by any stage of the localization pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration values (unsupported view counts, bad grids, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Inputs that violate an operation's preconditions.
    #[error("input error: {0}")]
    Input(String),

    /// Inputs that are individually fine but mutually inconsistent.
    #[error("consistency error: {0}")]
    Consistency(String),

    /// Malformed text input; `offset` is the byte position of the failure.
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },

    /// Structurally valid input referencing entities that do not exist.
    #[error("validation error: {0}")]
    Validation(String),

    /// A lookup into a table failed; the message names the missing key.
    #[error("lookup error: {0}")]
    Lookup(String),

    /// Input that is degenerate for the requested operation
    /// (e.g. a score volume with no usable entries).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A numeric stage produced a non-finite intermediate value.
    #[error("non-finite value produced by stage `{stage}`")]
    NonFinite { stage: &'static str },

    /// Training diverged or was otherwise aborted.
    #[error("training error at epoch {epoch}: {msg}")]
    Training { epoch: usize, msg: String },

    /// Serialized data that does not follow the expected layout.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
