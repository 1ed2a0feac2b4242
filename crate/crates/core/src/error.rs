use thiserror::Error;

use crate::model::ModelParams;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: field `{field}`: {message}")]
    Parse {
        line: usize,
        field: &'static str,
        message: String,
    },

    #[error("no users left after filtering (min {min_user_checkins} check-ins per user)")]
    EmptyDataset { min_user_checkins: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("featurization: {0}")]
    Featurize(String),

    #[error("power-law fit: {0}")]
    Fit(String),

    #[error("{kind} index {index} out of range (size {size})")]
    IndexOutOfRange {
        kind: &'static str,
        index: usize,
        size: usize,
    },

    #[error("unknown {kind} `{id}`")]
    UnknownId { kind: &'static str, id: String },

    #[error("model file: {0}")]
    Format(String),

    #[error("negative sampling: {0}")]
    Sampling(String),

    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged {
        epoch: usize,
        reason: String,
        last_good: Option<Box<ModelParams>>,
    },

    #[error("evaluation: {0}")]
    Evaluation(String),

    #[error("dataset mismatch: {0}")]
    Mismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
