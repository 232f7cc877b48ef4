//! Fixtures shared by the benchmarks.

use crossharm_core::diagdata::{generate, DiagConfig};
use crossharm_core::harness::{encode_corpus, EncodedCorpus, TrainConfig};
use crossharm_core::model::Model;
use crossharm_core::repr::LeadSheet;

/// Diagnostic-corpus config at width `d` (4 heads, `layers` layers).
pub fn config(d: usize, layers: usize) -> TrainConfig {
    TrainConfig { d_model: d, n_layers: layers, n_heads: 4, ..Default::default() }
}

pub fn model(cfg: &TrainConfig) -> Model {
    Model::new(cfg.model_config(), 0).expect("valid bench config")
}

pub fn pieces(n: usize) -> Vec<LeadSheet> {
    generate(&DiagConfig { n_train: n, n_test: 1, bars: 8, seed: 0 }).expect("valid diag config").0
}

pub fn corpus(cfg: &TrainConfig, n: usize) -> EncodedCorpus {
    encode_corpus(&pieces(n), &cfg.grid()).expect("diag pieces encode")
}
