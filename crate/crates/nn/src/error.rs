use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch at node {node} ({kind}): {msg}")]
    Shape {
        node: usize,
        kind: String,
        msg: String,
    },
    #[error("invalid tensor: {0}")]
    Tensor(String),
    #[error("invalid graph: {0}")]
    Graph(String),
    #[error("backward called without a recorded forward pass")]
    NoRecordedForward,
    #[error("non-finite gradient in parameter {0}; step rejected")]
    NonFiniteGradient(usize),
    #[error("gradient set does not match network parameters: {0}")]
    GradientMismatch(String),
    #[error("invalid hyper-parameter: {0}")]
    Hyper(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;
