use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad NIfTI magic string {0:?} (expected \"n+1\\0\")")]
    BadMagic([u8; 4]),

    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),

    #[error("invalid NIfTI header: {0}")]
    InvalidHeader(String),

    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("gradient count mismatch: {bvals} b-values but {dirs} directions")]
    CountMismatch { bvals: usize, dirs: usize },

    #[error("gradient direction {index} has norm {norm:.6} with b = {bval} (must be unit length)")]
    NonUnitDirection { index: usize, norm: f64, bval: f64 },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("index {index} out of range for axis {axis} of length {len}")]
    IndexOutOfRange { axis: usize, index: usize, len: usize },

    #[error("dimension mismatch: {left} vs {right}")]
    DimsMismatch { left: String, right: String },

    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("invalid gradient scheme: {0}")]
    InvalidScheme(String),

    #[error("empty mask")]
    EmptyMask,

    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("missing gradient for parameter {0}")]
    MissingGrad(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dims(left: impl std::fmt::Debug, right: impl std::fmt::Debug) -> Self {
        Error::DimsMismatch {
            left: format!("{left:?}"),
            right: format!("{right:?}"),
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite(_) | Error::MissingGrad(_))
    }
}
