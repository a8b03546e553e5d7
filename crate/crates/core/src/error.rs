use thiserror::Error;

/// Errors raised by the MemSPM engine.
#[derive(Debug, Error)]
pub enum Error {
    /// A vector or matrix had degenerate content (zero norm, non-finite entry).
    #[error("domain error: {0}")]
    Domain(String),

    /// A caller violated a documented precondition (shape mismatch, missing gradient, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A binary or text file could not be parsed.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },

    /// Training produced a non-finite loss.
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}
