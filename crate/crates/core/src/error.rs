use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid concept: {0}")]
    InvalidConcept(String),

    #[error("scene spec cannot be satisfied: {0}")]
    SceneSpec(String),

    #[error("invalid sample: {0}")]
    InvalidSample(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("checkpoint architecture mismatch: {0}")]
    ArchMismatch(String),

    #[error("non-finite loss at step {step} (batch {batch_id}): {detail}")]
    NonFiniteLoss {
        step: u64,
        batch_id: String,
        detail: String,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("dataset {path}: {reason}")]
    Dataset { path: PathBuf, reason: String },

    #[error("ground truth is empty; the metric is undefined")]
    EmptyGroundTruth,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    /// Stable machine-readable tag, used by the CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidConcept(_) => "invalid_concept",
            Error::SceneSpec(_) => "scene_spec",
            Error::InvalidSample(_) => "invalid_sample",
            Error::Shape(_) => "shape",
            Error::Contract(_) => "contract",
            Error::ArchMismatch(_) => "arch_mismatch",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Config(_) => "config",
            Error::Dataset { .. } => "dataset",
            Error::EmptyGroundTruth => "empty_ground_truth",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Tensor(_) => "tensor",
        }
    }
}
