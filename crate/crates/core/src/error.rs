use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header: {0}")]
    Header(String),

    #[error("payload size mismatch: expected {expected} bytes, found {found}")]
    PayloadSize { expected: usize, found: usize },

    #[error("label value {0} outside the body-region domain")]
    LabelDomain(u8),

    #[error("invalid spacing ({z}, {y}, {x}): components must be finite and positive")]
    Spacing { z: f64, y: f64, x: f64 },

    #[error("invalid dimensions: {0}")]
    Dims(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("no annotated voxels in the supervised region")]
    NoAnnotatedVoxels,

    #[error("non-finite loss at epoch {epoch}, step {step}: {value}")]
    NonFiniteLoss { epoch: usize, step: usize, value: f64 },

    #[error("optimizer step requested without populated gradients")]
    EmptyGradients,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
