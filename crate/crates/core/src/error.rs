use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = PeelError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum PeelError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("unsupported structure: {0}")]
    Unsupported(String),

    #[error("solver diverged at step {step}: objective is {value}")]
    Diverged { step: usize, value: f64 },

    #[error("rank-deficient system: numerical rank {rank} < {cols} columns")]
    RankDeficient { rank: usize, cols: usize },

    #[error("oracle: {0}")]
    Oracle(String),

    #[error("block {block}: {source}")]
    AtBlock {
        block: usize,
        #[source]
        source: Box<PeelError>,
    },

    #[error("shallow stage: {0}")]
    AtStem(#[source] Box<PeelError>),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed manifest {path}: {source}")]
    Manifest {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl PeelError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        PeelError::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        PeelError::Validation(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PeelError::Io {
            path: path.into(),
            source,
        }
    }

    /// Strips stage wrappers and returns the underlying error.
    pub fn root(&self) -> &PeelError {
        match self {
            PeelError::AtBlock { source, .. } => source.root(),
            PeelError::AtStem(source) => source.root(),
            other => other,
        }
    }
}
