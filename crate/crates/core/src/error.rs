use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by loading, validating and running the personalization head.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { expected: u8, found: u8 },

    #[error("truncated payload while reading {what}: needed {needed} bytes, {available} available")]
    Truncated {
        what: &'static str,
        needed: usize,
        available: usize,
    },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("{count} trailing bytes after payload")]
    TrailingBytes { count: usize },

    #[error("non-finite value in {field} at index {index}")]
    NonFinite { field: &'static str, index: usize },

    #[error("mask proposal value {value} at index {index} is outside [0, 1]")]
    MaskOutOfRange { index: usize, value: f64 },

    #[error("logit scale must be positive and finite, got {0}")]
    InvalidLogitScale(f64),

    #[error("invalid utf-8 in vocabulary entry {index}")]
    InvalidName { index: usize },

    #[error("dimension mismatch in {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("mask byte {value} at index {index} is not 0 or 1")]
    InvalidMaskByte { index: usize, value: u8 },

    #[error("invalid target dimension: {0}")]
    InvalidTarget(String),

    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },

    #[error("interpolation weight alpha must lie in [0, 1], got {0}")]
    AlphaOutOfRange(f64),

    #[error("alpha is {0} but no visual embedding is present")]
    MissingVisualEmbedding(f64),

    #[error("text bank already carries a personal entry")]
    AlreadyAugmented,

    #[error("sample has no feature map")]
    MissingFeatureMap,

    #[error("downsampled mask has no foreground cell")]
    EmptyForeground,

    #[error("non-finite value at stage {stage}")]
    NonFiniteStage { stage: &'static str },

    #[error("non-finite loss at training step {step}")]
    NonFiniteLoss { step: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{0}")]
    Infeasible(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dims(what: &'static str, expected: usize, actual: usize) -> Self {
        Error::DimensionMismatch {
            what,
            expected,
            actual,
        }
    }
}
