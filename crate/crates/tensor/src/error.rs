use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid tensor: {0}")]
    Invalid(String),
    #[error("softmax row {row} has every entry masked")]
    DegenerateRow { row: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("training diverged: non-finite gradient in parameter `{param}`")]
    Divergence { param: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;
