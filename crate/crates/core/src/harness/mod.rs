//! Training, evaluation and attention-dump orchestration.

mod attn;
mod config;
mod evaluate;
mod train;

pub use attn::{attention_for, attn_dump, AttentionDump, AttentionSummary, DIAGONAL_BAND};
pub use evaluate::{evaluate, Evaluation, PieceResult};
pub use config::{CheckpointPolicy, TrainConfig};
pub use train::{
    encode_corpus, load_train_state, split_validation, train, EncodedCorpus, RunRecord, TrainOutcome, Trainer,
};

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::curriculum::CurriculumError;
use crate::model::ModelError;
use crate::repr::ReprError;
use crate::sampler::SamplerError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("corpus: {0}")]
    Corpus(String),
    #[error("non-finite {what} at step {step}: {value}")]
    NonFinite { what: &'static str, step: u64, value: f64 },
    #[error("checkpoint does not match: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Repr(#[from] ReprError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Curriculum(#[from] CurriculumError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
}

impl HarnessError {
    pub(crate) fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        HarnessError::Io { path: path.to_path_buf(), message: e.to_string() }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

/// Loads a model checkpoint together with the grid it was trained on.
pub fn load_model(path: &Path) -> Result<(crate::model::Model, crate::repr::GridConfig)> {
    let ck = crate::model::Checkpoint::load(path).map_err(|e| HarnessError::io(path, e))?;
    let grid = ck
        .header
        .get("grid")
        .cloned()
        .ok_or_else(|| HarnessError::Mismatch(format!("{} has no grid config", path.display())))?;
    let grid = serde_json::from_value(grid).map_err(|e| HarnessError::Mismatch(e.to_string()))?;
    Ok((crate::model::Model::from_checkpoint(&ck)?, grid))
}
