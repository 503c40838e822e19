use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    // imaging
    #[error("patch of {patch_h}x{patch_w} at ({top}, {left}) does not fit a {bg_h}x{bg_w} background")]
    OutOfBounds {
        top: usize,
        left: usize,
        patch_h: usize,
        patch_w: usize,
        bg_h: usize,
        bg_w: usize,
    },
    #[error("channel mismatch: expected {expected}, got {actual}")]
    ChannelMismatch { expected: usize, actual: usize },
    #[error("malformed PPM header: {0}")]
    MalformedHeader(String),
    #[error("truncated PPM payload: expected {expected} bytes, found {actual}")]
    TruncatedPayload { expected: usize, actual: usize },
    #[error("unsupported PPM maxval {0} (only 255 is supported)")]
    UnsupportedMaxval(u32),
    #[error("invalid image: {0}")]
    InvalidImage(String),

    // pretext
    #[error("patch side {side} exceeds image dimension {dim} (ratio {ratio})")]
    PatchTooLarge { ratio: f64, side: usize, dim: usize },
    #[error("invalid pretext configuration: {0}")]
    InvalidConfig(String),
    #[error("dataset is empty")]
    EmptyDataset,

    // tensors and autodiff
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {0}")]
    NonFiniteValue(&'static str),
    #[error("backward requires a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    // models
    #[error("class {class} is invalid for a head with {classes} outputs")]
    InvalidClass { class: usize, classes: usize },
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),

    // training
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("test set is empty")]
    EmptyTestSet,
    #[error("need at least two label classes, found {0}")]
    TooFewClasses(usize),

    // datasets
    #[error("CIFAR file length {len} is not a multiple of 3073")]
    TruncatedRecord { len: u64 },
    #[error("label {label} out of range in record {record}")]
    LabelOutOfRange { label: u8, record: usize },
    #[error("config error: {0}")]
    Config(String),

    #[error("I/O failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse failure classes, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numeric,
}

impl ErrorClass {
    pub fn name(self) -> &'static str {
        match self {
            ErrorClass::Usage => "usage",
            ErrorClass::Data => "data",
            ErrorClass::Numeric => "numeric",
        }
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoFailure {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::NonFiniteValue(_) | Error::NonFiniteLoss { .. } => ErrorClass::Numeric,
            Error::InvalidConfig(_) | Error::Config(_) | Error::InvalidClass { .. } => {
                ErrorClass::Usage
            }
            _ => ErrorClass::Data,
        }
    }
}
