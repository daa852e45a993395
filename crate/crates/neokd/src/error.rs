//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    #[error("dimension error: {0}")]
    Dim(String),

    /// A value is outside the operation's domain (bad label, bad exit index,
    /// non-normalized target rows, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// An API contract was violated (non-scalar loss, mismatched buffers).
    #[error("contract error: {0}")]
    Contract(String),

    /// A binary or text artifact failed to decode. `offset` is the byte
    /// position at which decoding stopped.
    #[error("format error in {source_name} at byte {offset}: {reason}")]
    Format {
        source_name: String,
        offset: usize,
        reason: String,
    },

    /// Invalid or inconsistent configuration. `field` names the offending key.
    #[error("config error ({field}): {reason}")]
    Config { field: String, reason: String },

    /// Training aborted because the loss became non-finite.
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NanLoss { epoch: usize, batch: usize },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dim(msg.into())
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn format(source_name: impl Into<String>, offset: usize, reason: impl Into<String>) -> Self {
        Error::Format {
            source_name: source_name.into(),
            offset,
            reason: reason.into(),
        }
    }

    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
