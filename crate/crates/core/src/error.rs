use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {dim} is {actual}, expected {expected}")]
    ShapeMismatch {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("batch norm channel {channel}: running_var + eps = {value} is not positive")]
    NonPositiveVariance { channel: usize, value: f64 },

    #[error("invalid block configuration: {0}")]
    InvalidBlock(String),

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("graph is already fused")]
    AlreadyFused,

    #[error("weight file: {0}")]
    WeightFormat(String),

    #[error("weight file tensor {name}: file has shape {file:?}, model expects {model:?}")]
    WeightShape {
        name: String,
        file: Vec<usize>,
        model: Vec<usize>,
    },

    #[error("weight file is missing tensor {0}")]
    MissingTensor(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
