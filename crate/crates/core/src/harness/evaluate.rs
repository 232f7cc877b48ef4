use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{HarnessError, Result};
use crate::metrics::{compare_corpora, report, MetricReport, METRIC_NAMES};
use crate::model::Model;
use crate::repr::{decode_harmony, encode, GridConfig, LeadSheet};
use crate::rng::derive_rng;
use crate::sampler::{harmonize_encoded, ConstraintSet, SamplerConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PieceResult {
    pub name: String,
    pub generated: MetricReport,
    pub reference: MetricReport,
    pub correct: usize,
    pub positions: usize,
    pub model_calls: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub pieces: Vec<PieceResult>,
    pub generated_mean: MetricReport,
    pub reference_mean: MetricReport,
    /// Per-metric mean absolute difference, generated vs. reference.
    pub mean_abs_diff: MetricReport,
    /// Exact chord-symbol matches over all chord positions.
    pub accuracy: f64,
}

fn mean_report(rs: &[MetricReport]) -> MetricReport {
    let mut acc = [0.0; 9];
    for r in rs {
        acc.iter_mut().zip(r.values()).for_each(|(a, v)| *a += v);
    }
    acc.iter_mut().for_each(|a| *a /= rs.len().max(1) as f64);
    MetricReport::from_values(acc)
}

/// Harmonizes every piece's melody and compares with its own chords.
///
/// The reference is the ground-truth harmony passed through the same grid
/// (so quantization and truncation affect both sides alike). Piece `i` uses
/// the sampler stream `(rng_seed, i)`.
pub fn evaluate(model: &Model, grid: &GridConfig, corpus: &[(String, LeadSheet)], cfg: &SamplerConfig) -> Result<Evaluation> {
    if corpus.is_empty() {
        return Err(HarnessError::Corpus("nothing to evaluate".into()));
    }
    let mut pieces = Vec::with_capacity(corpus.len());
    for (i, (name, sheet)) in corpus.iter().enumerate() {
        let item = encode(sheet, grid)?;
        let mut rng = derive_rng(cfg.rng_seed, &[i as u64]);
        let (tokens, model_calls) = harmonize_encoded(model, &item, cfg, &ConstraintSet::default(), &mut rng)?;
        let chord_positions = item.layout.chord_positions();
        let correct = chord_positions.iter().filter(|&&p| tokens[p] == item.harmony[p]).count();
        let ts = sheet.time_signature;
        let generated = LeadSheet { chords: decode_harmony(&tokens, grid, ts), ..sheet.clone() };
        let reference = LeadSheet { chords: decode_harmony(&item.harmony, grid, ts), ..sheet.clone() };
        pieces.push(PieceResult {
            name: name.clone(),
            generated: report(&generated),
            reference: report(&reference),
            correct,
            positions: chord_positions.len(),
            model_calls,
        });
    }
    let gen: Vec<MetricReport> = pieces.iter().map(|p| p.generated).collect();
    let refs: Vec<MetricReport> = pieces.iter().map(|p| p.reference).collect();
    let correct: usize = pieces.iter().map(|p| p.correct).sum();
    let total: usize = pieces.iter().map(|p| p.positions).sum();
    Ok(Evaluation {
        generated_mean: mean_report(&gen),
        reference_mean: mean_report(&refs),
        mean_abs_diff: compare_corpora(&gen, &refs).map_err(|e| HarnessError::Corpus(e.to_string()))?,
        accuracy: correct as f64 / total.max(1) as f64,
        pieces,
    })
}

impl Evaluation {
    /// Comparison CSV: rows `generated_mean`, `reference_mean`, `mean_abs_diff`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| HarnessError::io(path, e))?;
        let mut header = vec!["row"];
        header.extend(METRIC_NAMES);
        let csv_err = |e: csv::Error| HarnessError::io(path, e);
        w.write_record(&header).map_err(csv_err)?;
        for (label, r) in
            [("generated_mean", &self.generated_mean), ("reference_mean", &self.reference_mean), ("mean_abs_diff", &self.mean_abs_diff)]
        {
            let mut rec = vec![label.to_string()];
            rec.extend(r.values().iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| HarnessError::io(path, e))?;
        Ok(())
    }

    /// Per-piece CSV: generated metrics, reference metrics and accuracy counts.
    pub fn write_pieces_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| HarnessError::io(path, e))?;
        let csv_err = |e: csv::Error| HarnessError::io(path, e);
        let mut header = vec!["piece".to_string()];
        header.extend(METRIC_NAMES.iter().map(|m| format!("gen_{m}")));
        header.extend(METRIC_NAMES.iter().map(|m| format!("ref_{m}")));
        header.extend(["correct", "positions", "model_calls"].map(String::from));
        w.write_record(&header).map_err(csv_err)?;
        for p in &self.pieces {
            let mut rec = vec![p.name.clone()];
            rec.extend(p.generated.values().iter().chain(p.reference.values().iter()).map(|v| v.to_string()));
            rec.extend([p.correct, p.positions, p.model_calls].map(|v| v.to_string()));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| HarnessError::io(path, e))?;
        Ok(())
    }
}
