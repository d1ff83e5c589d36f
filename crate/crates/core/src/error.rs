use std::io;

use thiserror::Error;

use crate::transport::codec::DecodeError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller supplied an argument outside the operation's domain.
    #[error("invalid input: {0}")]
    Input(String),

    /// Upload/download ordering or shape agreement between parties was violated.
    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("non-finite value at {location}")]
    Numeric { location: String },

    /// Parameter averaging requires every client to share one architecture.
    #[error("model heterogeneity unsupported by FedAvg: {0}")]
    Heterogeneity(String),

    #[error("malformed {field}: {detail}")]
    Format { field: String, detail: String },

    #[error("config key `{key}`: {detail}")]
    Config { key: String, detail: String },

    #[error("encode error: {0}")]
    Encode(String),

    #[error(transparent)]
    Decode(#[from] DecodeError),

    #[error("network: {0}")]
    Network(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn protocol(msg: impl Into<String>) -> Self {
        Error::Protocol(msg.into())
    }

    pub(crate) fn format(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn config(key: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            detail: detail.into(),
        }
    }
}
