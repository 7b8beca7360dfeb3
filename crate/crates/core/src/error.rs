use thiserror::Error;

use crate::model::ClassId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid box [{x_min}, {y_min}, {x_max}, {y_max}]: area must be positive")]
    InvalidBox {
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
    },

    #[error("class {0} is already registered")]
    DuplicateClass(ClassId),

    #[error("class {got} cannot be registered next, expected {expected}")]
    NonContiguousClass { got: ClassId, expected: ClassId },

    #[error("no distillation target for scene {scene_id} instance {instance}")]
    MissingDistillTarget { scene_id: u64, instance: usize },

    #[error("{0} must not be empty")]
    Empty(&'static str),

    #[error("non-finite loss during {stage} at step {step}: {detail}")]
    NonFinite {
        stage: String,
        step: usize,
        detail: String,
    },

    #[error("malformed data: {0}")]
    Data(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
