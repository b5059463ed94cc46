//! Error type shared by every analysis module.

use std::io;

/// Errors raised by the trajectory engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("bad magic bytes {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error(
        "truncated payload at byte offset {offset}: needed {needed} bytes, {available} available"
    )]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("malformed {what} at byte offset {offset}: {detail}")]
    Malformed {
        what: &'static str,
        offset: usize,
        detail: String,
    },

    #[error("invalid metadata: {0}")]
    InvalidMeta(String),

    #[error("invalid trace `{example_id}`: {field}: {detail}")]
    InvalidExample {
        example_id: String,
        field: String,
        detail: String,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("only one class present ({0})")]
    SingleClass(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("degenerate feature: {0}")]
    DegenerateFeature(String),

    #[error("missing feature: {0}")]
    MissingFeature(String),

    #[error("config key `{key}`: {detail}")]
    Config { key: String, detail: String },

    #[error("harness: {0}")]
    Harness(String),

    #[error("report serialization: {0}")]
    Report(String),
}

impl Error {
    pub fn config(key: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid_example(
        example_id: &str,
        field: impl Into<String>,
        detail: impl Into<String>,
    ) -> Self {
        Error::InvalidExample {
            example_id: example_id.to_owned(),
            field: field.into(),
            detail: detail.into(),
        }
    }

    /// True for errors caused by a malformed or inconsistent trace or sidecar file.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::BadMagic { .. }
                | Error::UnsupportedVersion(_)
                | Error::Truncated { .. }
                | Error::Checksum { .. }
                | Error::Malformed { .. }
                | Error::InvalidMeta(_)
                | Error::InvalidExample { .. }
        )
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Report(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Report(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
