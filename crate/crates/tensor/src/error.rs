use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
