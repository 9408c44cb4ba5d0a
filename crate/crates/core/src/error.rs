use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch in {op}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("vertex {vertex} has no mirror partner across x = 0")]
    SymmetryViolation { vertex: usize },

    #[error("degenerate mesh: {0}")]
    DegenerateMesh(String),

    #[error("degenerate rotation: quaternion norm {0:e} is too small")]
    DegenerateRotation(f64),

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("primitive `{0}` has no adjoint")]
    MissingAdjoint(String),

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("numerical failure at step {step} (instance {instance}): {detail}")]
    Numerical {
        step: usize,
        instance: String,
        detail: String,
    },

    #[error("data validation failed: {0}")]
    DataValidation(String),

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(op: &'static str, expected: &[usize], actual: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }

    /// Process exit status used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::DataValidation(_) => 3,
            Error::Numerical { .. } | Error::NonFinite(_) | Error::NonFiniteGradient(_) => 4,
            Error::Incompatible(_) => 5,
            _ => 2,
        }
    }
}
