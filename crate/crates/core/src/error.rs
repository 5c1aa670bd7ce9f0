use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("insufficient samples: {0} non-zero differences, need at least 5")]
    InsufficientSamples(usize),

    #[error("{path}: bad magic (expected {expected:?})")]
    BadMagic { path: PathBuf, expected: &'static str },

    #[error("{path}: truncated payload")]
    Truncated { path: PathBuf },

    #[error("{path}: invalid dimensions {detail}")]
    InvalidDimensions { path: PathBuf, detail: String },

    #[error("{path}: dimension overflow")]
    DimensionOverflow { path: PathBuf },

    #[error("{path}: unsupported format: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("geometry fingerprint mismatch: checkpoint {checkpoint}, data {data}")]
    Fingerprint { checkpoint: String, data: String },

    #[error("non-finite loss at step {step} (lr {lr})")]
    NonFiniteLoss { step: usize, lr: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for failures caused by the filesystem rather than by the inputs.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
