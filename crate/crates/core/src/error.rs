use std::path::PathBuf;

use restc_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RestcError {
    #[error("cannot access {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed input {}: {message}", path.display())]
    Format { path: PathBuf, message: String },
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("degenerate embedding: row {row} of {which} has zero norm")]
    DegenerateEmbedding { which: &'static str, row: usize },
    #[error("non-finite loss at epoch {epoch}, batch {batch} ({breakdown})")]
    NumericalAbort {
        epoch: usize,
        batch: usize,
        breakdown: String,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl RestcError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 usage/config, 2 data, 3 numerical abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 1,
            Self::Io { .. }
            | Self::Format { .. }
            | Self::EmptyDataset(_)
            | Self::Checkpoint(_)
            | Self::Contract(_) => 2,
            Self::DegenerateEmbedding { .. } | Self::NumericalAbort { .. } | Self::Tensor(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, RestcError>;
