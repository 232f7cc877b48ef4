use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{HarnessError, Result};
use crate::curriculum::{md_num_stages, CurriculumKind, CurriculumSpec, R10_STAGES};
use crate::model::{Activation, ModelConfig};
use crate::repr::{BarMode, GridConfig, MelodyMode, Quant, VOCAB_SIZE};
use crate::tensor::AdamWConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointPolicy {
    /// Final epoch for FF, best validation loss otherwise.
    Auto,
    Last,
    BestVal,
}

/// Everything that determines a training run. Stored as a flat TOML file;
/// omitted keys take the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    // grid
    pub quant: Quant,
    pub bar_mode: BarMode,
    pub melody_mode: MelodyMode,
    pub max_len: usize,
    // model
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_mult: usize,
    pub activation: Activation,
    pub stage_embedding: bool,
    // curriculum
    pub curriculum: CurriculumKind,
    pub ff_exponent: f64,
    pub r10_fraction: f64,
    // optimization
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    // checkpoints and validation
    pub checkpoint_policy: CheckpointPolicy,
    /// Epochs without validation improvement before stopping (best-val policy only; 0 = never stop early).
    pub patience: usize,
    /// Held-out share of the training corpus when no validation corpus is given.
    pub val_fraction: f64,
    pub val_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            quant: Quant::Q4,
            bar_mode: BarMode::Bar,
            melody_mode: MelodyMode::Pc,
            max_len: 40,
            d_model: 256,
            n_layers: 4,
            n_heads: 4,
            ff_mult: 4,
            activation: Activation::Gelu,
            stage_embedding: false,
            curriculum: CurriculumKind::Ff,
            ff_exponent: crate::curriculum::DEFAULT_FF_EXPONENT,
            r10_fraction: crate::curriculum::DEFAULT_R10_FRACTION,
            epochs: 200,
            batch_size: 8,
            lr: 1e-4,
            weight_decay: 0.01,
            seed: 0,
            checkpoint_policy: CheckpointPolicy::Auto,
            patience: 20,
            val_fraction: 0.1,
            val_seed: 0x5eed,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HarnessError::Config(m.into()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("lr must be positive and weight_decay non-negative");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must be in [0, 1)");
        }
        self.curriculum_spec().validate()?;
        self.model_config().validate()?;
        Ok(())
    }

    pub fn grid(&self) -> GridConfig {
        GridConfig { quant: self.quant, bar_mode: self.bar_mode, melody_mode: self.melody_mode, max_len: self.max_len }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            ff_mult: self.ff_mult,
            max_len: self.max_len,
            melody_dim: self.grid().melody_dim(),
            vocab_size: VOCAB_SIZE,
            bar_mode: self.bar_mode,
            use_stage_embedding: self.stage_embedding,
            max_stage: md_num_stages(self.max_len).max(R10_STAGES),
            activation: self.activation,
        }
    }

    pub fn curriculum_spec(&self) -> CurriculumSpec {
        CurriculumSpec {
            kind: self.curriculum,
            ff_exponent: self.ff_exponent,
            r10_fraction: self.r10_fraction,
            rng_seed: self.seed,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { lr: self.lr, weight_decay: self.weight_decay, ..AdamWConfig::default() }
    }

    /// Whether the saved model is the best-validation one.
    pub fn keeps_best_val(&self) -> bool {
        match self.checkpoint_policy {
            CheckpointPolicy::Auto => self.curriculum != CurriculumKind::Ff,
            CheckpointPolicy::Last => false,
            CheckpointPolicy::BestVal => true,
        }
    }

    /// SHA-256 of the canonical JSON form; every field participates.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    /// `TRAIN_QUANT_BAR_MEL` prefix of experiment directory names; append the
    /// unmasking strategy for generation outputs.
    pub fn experiment_name(&self) -> String {
        format!("{}_{}_{}_{}", self.curriculum, self.quant, self.bar_mode, self.melody_mode)
    }
}
