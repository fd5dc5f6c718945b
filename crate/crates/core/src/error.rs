use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse classification used by front-ends to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Io,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),

    #[error("malformed PNG {path}: {reason}")]
    MalformedPng { path: PathBuf, reason: String },

    #[error("unsupported PNG bit depth {0} (expected 8 or 16)")]
    UnsupportedBitDepth(u8),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("size mismatch: header implies {expected} bytes, payload has {found}")]
    SizeMismatch { expected: usize, found: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("unknown {kind} `{name}`")]
    Unknown { kind: &'static str, name: String },

    #[error("affine part is not invertible (|det| = {det:e})")]
    NonInvertible { det: f64 },

    #[error("non-rigid inversion diverged on {fraction:.3} of pixels")]
    InversionDiverged { fraction: f64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::MissingFile(_)
            | Error::Io(_)
            | Error::MalformedPng { .. }
            | Error::UnsupportedBitDepth(_)
            | Error::BadMagic { .. }
            | Error::UnsupportedVersion(_)
            | Error::SizeMismatch { .. } => ErrorClass::Io,
            Error::NonInvertible { .. } | Error::InversionDiverged { .. } | Error::NonFinite(_) => ErrorClass::Numeric,
            _ => ErrorClass::Config,
        }
    }

    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        Error::DimensionMismatch(msg.into())
    }
}
