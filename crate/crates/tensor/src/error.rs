use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: dimension error: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: axis {axis} out of range for {ndim}-d tensor")]
    Axis {
        op: &'static str,
        axis: usize,
        ndim: usize,
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),
}

impl TensorError {
    pub(crate) fn shapes(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        TensorError::Shape {
            op,
            detail: format!("incompatible shapes {lhs:?} and {rhs:?}"),
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Shape {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
