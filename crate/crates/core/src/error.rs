use dbat_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DbatError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("degenerate layer `{0}`: self-similarity is numerically zero")]
    DegenerateLayer(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: usize, loss: f64 },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = DbatError> = std::result::Result<T, E>;
