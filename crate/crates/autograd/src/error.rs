use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidShape { op: &'static str, msg: String },
    #[error("{op}: index {index} out of range (bound {bound})")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("attention key padding mask covers every key")]
    DegenerateMask,
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("data error: {0}")]
    Data(String),
}

impl TensorError {
    pub fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        TensorError::Shape { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
    }

    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        TensorError::InvalidShape { op, msg: msg.into() }
    }
}
