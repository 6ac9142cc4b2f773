use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite gradient in layer {layer}")]
    NonFiniteGradient { layer: usize },

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error(
        "training diverged at epoch {epoch}, iteration {iteration} (omega={omega}, lr={lr}): {detail}"
    )]
    Diverged {
        epoch: usize,
        iteration: usize,
        omega: f64,
        lr: f64,
        detail: String,
    },

    #[error("missing labels: {0}")]
    MissingLabels(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(expected: impl ToString, got: impl ToString) -> Error {
    Error::ShapeMismatch {
        expected: expected.to_string(),
        got: got.to_string(),
    }
}
