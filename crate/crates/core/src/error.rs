use thiserror::Error;

use crate::training::Model;

#[derive(Debug, Error)]
pub enum MgkError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("softmax row {row} has no unmasked entries")]
    DegenerateRow { row: usize },

    #[error("linear attention normalizer vanished at row {row}")]
    DegenerateNormalizer { row: usize },

    #[error("responsibility mass vanished for query {row}")]
    DegenerateResponsibility { row: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("training diverged at epoch {epoch}, step {step} (last finite loss {last_finite_loss})")]
    TrainingFailure {
        epoch: usize,
        step: usize,
        last_finite_loss: f64,
        /// Parameters as they were before the diverging update.
        last_finite_model: Box<Model>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = MgkError> = std::result::Result<T, E>;

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(MgkError::Config(msg.into()))
}
