use thiserror::Error;

/// Errors raised across the distillation toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("input `{0}` is not bound")]
    UnboundInput(String),
    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("backpropagate called before evaluate")]
    NotEvaluated,
    #[error("graph has no output node")]
    NoOutput,
    #[error("output node must be scalar, got {rows}x{cols}")]
    NonScalarOutput { rows: usize, cols: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate box: {0}")]
    DegenerateBox(String),
    #[error("non-finite loss at training step {step}")]
    NonFiniteLoss { step: usize },
    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
