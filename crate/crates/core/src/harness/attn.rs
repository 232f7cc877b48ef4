use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{HarnessError, Result};
use crate::metrics::{align_quadrant, diagonality};
use crate::model::{cross_quadrant, mean_attention, Model, ModelInput};
use crate::repr::{encode, EncodedPair, GridConfig, LeadSheet};
use crate::tensor::Tensor;

/// Band half-width used when reporting diagonality.
pub const DIAGONAL_BAND: usize = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionDump {
    /// Mean over layers and heads, `[seq, seq]`.
    pub mean_map: Tensor,
    /// Harmony-query / melody-key block, `[L, L]`.
    pub cross: Tensor,
    /// `cross` restricted to chord positions.
    pub aligned: Tensor,
    pub chord_positions: Vec<usize>,
    pub diagonality: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionSummary {
    pub seq_len: usize,
    pub max_len: usize,
    pub chord_positions: Vec<usize>,
    pub band: usize,
    pub diagonality: f64,
    /// Largest deviation of a mean-map row sum from 1.
    pub max_row_sum_error: f64,
}

/// Attention of `model` on `item` with the whole harmony masked.
pub fn attention_for(model: &Model, item: &EncodedPair) -> Result<AttentionDump> {
    let harmony = item.masked_harmony();
    let stage = model.config().use_stage_embedding.then_some(0);
    let input = ModelInput { melody: &item.melody_roll, harmony: &harmony, ts: item.ts_vector.as_ref(), stage };
    let (_, capture) = model.forward(&input, true)?;
    let mean_map = mean_attention(&capture.expect("capture requested"))?;
    let cross = cross_quadrant(&mean_map, model.config())?;
    let chord_positions = item.layout.chord_positions();
    let metric = |e: crate::metrics::MetricsError| HarnessError::Corpus(e.to_string());
    let aligned = align_quadrant(&cross, &chord_positions).map_err(metric)?;
    let diagonality = diagonality(&aligned, DIAGONAL_BAND).map_err(metric)?;
    Ok(AttentionDump { mean_map, cross, aligned, chord_positions, diagonality })
}

fn write_matrix(path: &Path, m: &Tensor) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(|e| HarnessError::io(path, e))?;
    for r in 0..m.rows() {
        w.write_record(m.row(r).iter().map(|v| v.to_string())).map_err(|e| HarnessError::io(path, e))?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

/// Writes `mean_attention.csv`, `cross_quadrant.csv`, `aligned_quadrant.csv`
/// and `summary.json` into `out_dir`.
pub fn attn_dump(model: &Model, grid: &GridConfig, piece: &LeadSheet, out_dir: &Path) -> Result<AttentionSummary> {
    let item = encode(piece, grid)?;
    let dump = attention_for(model, &item)?;
    std::fs::create_dir_all(out_dir).map_err(|e| HarnessError::io(out_dir, e))?;
    write_matrix(&out_dir.join("mean_attention.csv"), &dump.mean_map)?;
    write_matrix(&out_dir.join("cross_quadrant.csv"), &dump.cross)?;
    write_matrix(&out_dir.join("aligned_quadrant.csv"), &dump.aligned)?;
    let max_row_sum_error = (0..dump.mean_map.rows())
        .map(|r| (dump.mean_map.row(r).iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    let summary = AttentionSummary {
        seq_len: dump.mean_map.rows(),
        max_len: grid.max_len,
        chord_positions: dump.chord_positions,
        band: DIAGONAL_BAND,
        diagonality: dump.diagonality,
        max_row_sum_error,
    };
    let path = out_dir.join("summary.json");
    std::fs::write(&path, serde_json::to_string_pretty(&summary).expect("summary serializes"))
        .map_err(|e| HarnessError::io(&path, e))?;
    Ok(summary)
}
