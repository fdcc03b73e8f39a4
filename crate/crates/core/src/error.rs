use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not compose.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A value is outside the domain an operation accepts.
    #[error("input error: {0}")]
    Input(String),

    /// An API was called out of sequence (double backward, missing grads, ...).
    #[error("usage error: {0}")]
    Usage(String),

    #[error("config error: {0}")]
    Config(String),

    /// A file did not match its documented binary or text layout.
    #[error("format error: {0}")]
    Format(String),

    /// Training produced a non-finite loss or parameter.
    #[error("numeric error at epoch {epoch}, batch {batch}, member {member}: {detail}")]
    Numeric {
        epoch: usize,
        batch: usize,
        member: usize,
        detail: String,
    },

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
