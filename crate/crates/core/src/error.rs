use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("invalid class count {0}: at least 2 classes are required")]
    InvalidClassCount(usize),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("insufficient samples: {samples} samples cannot form {clusters} clusters")]
    InsufficientSamples { samples: usize, clusters: usize },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("degenerate class {class}: no samples carry this label")]
    DegenerateClass { class: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("label {label} at position {index} is outside [0, {bound})")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        bound: usize,
    },

    #[error("invalid split: {0}")]
    InvalidSplit(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("stale forward cache: cache is from parameter version {cache}, parameters are at {params}")]
    StaleCache { cache: u64, params: u64 },

    #[error("non-finite gradient in {0}; step rejected")]
    NonFiniteGradient(&'static str),

    #[error("non-finite loss at epoch {epoch}, batch {batch}, component {component}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        component: &'static str,
    },

    #[error("parse error in {path}: {message} (at {location})")]
    Parse {
        path: PathBuf,
        location: String,
        message: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(
        path: impl Into<PathBuf>,
        location: impl Into<String>,
        message: impl Into<String>,
    ) -> Self {
        Error::Parse {
            path: path.into(),
            location: location.into(),
            message: message.into(),
        }
    }
}
