//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error")]
    Io(#[from] std::io::Error),

    /// Bad magic, unsupported version, checksum mismatch, unknown enum tag.
    #[error("format error: {0}")]
    Format(String),

    /// The byte stream ended (or was damaged) inside the named section.
    #[error("corruption error: truncated or damaged `{section}` section")]
    Corruption { section: String },

    #[error("validation error in record {index}: {message}")]
    Validation { index: usize, message: String },

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),
}

impl Error {
    pub fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn corrupt(section: &str) -> Self {
        Error::Corruption {
            section: section.to_string(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
