//! Training curricula: which harmony positions are hidden from the model at a
//! given step, and the masked-prediction loss over them.
//!
//! All counts here refer to *maskable* positions, i.e. the chord slots of a
//! grid. Bar and pad columns are structural and are never masked or scored.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::repr::{TokenId, BAR_TOKEN, MASK_TOKEN, PAD_TOKEN};
use crate::tensor::{Graph, Tensor, TensorError, Var};

pub const DEFAULT_FF_EXPONENT: f64 = 5.0;
pub const DEFAULT_R10_FRACTION: f64 = 0.1;
pub const R10_STAGES: usize = 10;

#[derive(Debug, Error)]
pub enum CurriculumError {
    #[error("invalid curriculum: {0}")]
    Spec(String),
    #[error("step {step} outside schedule of {total} steps")]
    StepOutOfRange { step: u64, total: u64 },
    #[error("{n_visible} visible positions leaves nothing masked among {len}")]
    TooManyVisible { n_visible: usize, len: usize },
    #[error("stage {stage} outside 0..{stages}")]
    StageOutOfRange { stage: usize, stages: usize },
    #[error("no supervised positions")]
    EmptySupervision,
    #[error("length mismatch: {0}")]
    Length(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, CurriculumError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CurriculumKind {
    #[serde(rename = "FF")]
    Ff,
    #[serde(rename = "MD")]
    Md,
    #[serde(rename = "R10")]
    R10,
}

impl fmt::Display for CurriculumKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CurriculumKind::Ff => "FF",
            CurriculumKind::Md => "MD",
            CurriculumKind::R10 => "R10",
        })
    }
}

impl FromStr for CurriculumKind {
    type Err = CurriculumError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "FF" => Ok(Self::Ff),
            "MD" => Ok(Self::Md),
            "R10" | "R10%" => Ok(Self::R10),
            _ => Err(CurriculumError::Spec(format!("unknown curriculum `{s}` (expected FF, MD or R10)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumSpec {
    pub kind: CurriculumKind,
    pub ff_exponent: f64,
    pub r10_fraction: f64,
    pub rng_seed: u64,
}

impl CurriculumSpec {
    pub fn new(kind: CurriculumKind, rng_seed: u64) -> Self {
        Self { kind, ff_exponent: DEFAULT_FF_EXPONENT, r10_fraction: DEFAULT_R10_FRACTION, rng_seed }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ff_exponent > 0.0 && self.ff_exponent.is_finite()) {
            return Err(CurriculumError::Spec(format!("ff_exponent must be > 0, got {}", self.ff_exponent)));
        }
        if !(self.r10_fraction > 0.0 && self.r10_fraction < 1.0) {
            return Err(CurriculumError::Spec(format!("r10_fraction must be in (0, 1), got {}", self.r10_fraction)));
        }
        Ok(())
    }

    /// Number of distinct stage indices a training mask can carry.
    pub fn num_stages(&self, maskable: usize) -> usize {
        match self.kind {
            CurriculumKind::Ff => 1,
            CurriculumKind::Md => md_num_stages(maskable),
            CurriculumKind::R10 => R10_STAGES + 1,
        }
    }

    /// Training mask for one item at optimizer step `step` of `total_steps`.
    ///
    /// `maskable` lists the chord-slot indices of a grid of length `len`.
    pub fn training_mask(
        &self,
        rng: &mut impl Rng,
        step: u64,
        total_steps: u64,
        len: usize,
        maskable: &[usize],
    ) -> Result<MaskState> {
        let n = maskable.len();
        if n == 0 {
            return Err(CurriculumError::EmptySupervision);
        }
        match self.kind {
            CurriculumKind::Ff => {
                let visible = ff_num_unmasked(step, total_steps, n, self.ff_exponent)?;
                ff_mask(rng, len, maskable, visible)
            }
            CurriculumKind::Md => {
                // The final stage reveals everything, so only earlier ones are inputs.
                let k = rng.random_range(0..md_num_stages(n));
                md_mask(len, maskable, k)
            }
            CurriculumKind::R10 => {
                let k = rng.random_range(0..=R10_STAGES);
                r10_mask(rng, len, maskable, k, self.r10_fraction)
            }
        }
    }
}

/// Which harmony positions are hidden.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskState {
    /// One flag per harmony grid position.
    pub masked: Vec<bool>,
    pub stage: usize,
    /// Maskable positions left visible.
    pub visible_count: usize,
}

impl MaskState {
    fn from_visible(len: usize, maskable: &[usize], visible: impl IntoIterator<Item = usize>, stage: usize) -> Self {
        let mut masked = vec![false; len];
        for &p in maskable {
            masked[p] = true;
        }
        let mut visible_count = 0;
        for i in visible {
            masked[maskable[i]] = false;
            visible_count += 1;
        }
        Self { masked, stage, visible_count }
    }

    pub fn len(&self) -> usize {
        self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    pub fn masked_positions(&self) -> Vec<usize> {
        self.masked.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
    }
}

/// Visible-count for the full-to-full schedule:
/// `min(floor((s / s_total)^e * L), L - 1)`.
pub fn ff_num_unmasked(step: u64, total_steps: u64, maskable: usize, exponent: f64) -> Result<usize> {
    if step >= total_steps {
        return Err(CurriculumError::StepOutOfRange { step, total: total_steps });
    }
    if maskable == 0 {
        return Err(CurriculumError::EmptySupervision);
    }
    let frac = (step as f64 / total_steps as f64).powf(exponent);
    let n = (frac * maskable as f64).floor() as usize;
    Ok(n.min(maskable - 1))
}

/// Uniformly random `n_visible`-subset of `maskable` left visible.
pub fn ff_mask(rng: &mut impl Rng, len: usize, maskable: &[usize], n_visible: usize) -> Result<MaskState> {
    check_maskable(len, maskable)?;
    if n_visible >= maskable.len() {
        return Err(CurriculumError::TooManyVisible { n_visible, len: maskable.len() });
    }
    let picks = index::sample(rng, maskable.len(), n_visible);
    Ok(MaskState::from_visible(len, maskable, picks.iter(), 0))
}

/// `ceil(log2 L)` reveal stages (one for `L = 1`).
pub fn md_num_stages(maskable: usize) -> usize {
    let mut k = 0;
    while (1usize << k) < maskable {
        k += 1;
    }
    k.max(1)
}

/// Visible index sets of the binary-subdivision schedule, stage 0 (nothing)
/// through the final stage (everything).
///
/// Stage `k` of `K = ceil(log2 L)` keeps indices divisible by `2^(K-k)`, so
/// each stage contains the previous one and at most doubles it.
pub fn md_schedule(maskable: usize) -> Vec<Vec<usize>> {
    let stages = md_num_stages(maskable);
    let mut out = vec![Vec::new()];
    for k in 1..=stages {
        let stride = 1usize << (stages - k);
        out.push((0..maskable).step_by(stride).collect());
    }
    out
}

/// Mask for MD stage `k` (`0 <= k < stages`); indices refer into `maskable`.
pub fn md_mask(len: usize, maskable: &[usize], stage: usize) -> Result<MaskState> {
    check_maskable(len, maskable)?;
    let stages = md_num_stages(maskable.len());
    if stage >= stages {
        return Err(CurriculumError::StageOutOfRange { stage, stages });
    }
    let schedule = md_schedule(maskable.len());
    Ok(MaskState::from_visible(len, maskable, schedule[stage].iter().copied(), stage))
}

/// Visible count after `stage` rounds of revealing `fraction` of what
/// remains: `round(L * (1 - (1 - fraction)^stage))`, halves rounded up.
pub fn r10_visible_count(maskable: usize, stage: usize, fraction: f64) -> usize {
    let v = maskable as f64 * (1.0 - (1.0 - fraction).powi(stage as i32));
    // Guard against 0.49999... from inexact powers.
    ((v + 0.5 + 1e-9).floor() as usize).min(maskable)
}

/// Random mask with the R10 visible count for `stage`, keeping at least one
/// position masked.
pub fn r10_mask(rng: &mut impl Rng, len: usize, maskable: &[usize], stage: usize, fraction: f64) -> Result<MaskState> {
    check_maskable(len, maskable)?;
    if maskable.is_empty() {
        return Err(CurriculumError::EmptySupervision);
    }
    let n = r10_visible_count(maskable.len(), stage, fraction).min(maskable.len() - 1);
    let picks = index::sample(rng, maskable.len(), n);
    Ok(MaskState::from_visible(len, maskable, picks.iter(), stage))
}

/// Replace masked positions with the mask token. Bar and pad tokens are
/// always left in place.
pub fn apply_mask(tokens: &[TokenId], state: &MaskState) -> Result<Vec<TokenId>> {
    if tokens.len() != state.len() {
        return Err(CurriculumError::Length(format!("{} tokens vs mask of {}", tokens.len(), state.len())));
    }
    Ok(tokens
        .iter()
        .zip(&state.masked)
        .map(|(&t, &m)| if m && !matches!(t, BAR_TOKEN | PAD_TOKEN) { MASK_TOKEN } else { t })
        .collect())
}

/// Per-position loss weights: 1 at masked positions whose target is a chord
/// or no-chord, 0 elsewhere.
pub fn supervision_weights(targets: &[TokenId], state: &MaskState) -> Vec<f64> {
    targets
        .iter()
        .zip(&state.masked)
        .map(|(&t, &m)| if m && !matches!(t, BAR_TOKEN | PAD_TOKEN | MASK_TOKEN) { 1.0 } else { 0.0 })
        .collect()
}

/// Mean negative log-likelihood over the supervised positions of one piece;
/// `logits` is `[L, vocab]`.
pub fn mlm_loss(logits: &Tensor, targets: &[TokenId], state: &MaskState) -> Result<f64> {
    if logits.shape().len() != 2 || logits.rows() != targets.len() || targets.len() != state.len() {
        return Err(CurriculumError::Length(format!(
            "logits {:?}, {} targets, mask of {}",
            logits.shape(),
            targets.len(),
            state.len()
        )));
    }
    let weights = supervision_weights(targets, state);
    let mut total = 0.0;
    let mut count = 0.0;
    for (i, (&t, &w)) in targets.iter().zip(&weights).enumerate() {
        if w == 0.0 {
            continue;
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
        total += lse - row[t];
        count += 1.0;
    }
    if count == 0.0 {
        return Err(CurriculumError::EmptySupervision);
    }
    Ok(total / count)
}

/// Batched loss node: `logits` is `[batch * L, vocab]`, one mask per item.
/// The mean runs over all supervised positions in the batch.
pub fn mlm_loss_node(g: &mut Graph, logits: Var, targets: &[TokenId], states: &[MaskState]) -> Result<Var> {
    let flat: Vec<f64> = {
        let mut w = Vec::with_capacity(targets.len());
        let mut offset = 0;
        for s in states {
            let end = offset + s.len();
            if end > targets.len() {
                return Err(CurriculumError::Length("masks cover more positions than targets".into()));
            }
            w.extend(supervision_weights(&targets[offset..end], s));
            offset = end;
        }
        if offset != targets.len() {
            return Err(CurriculumError::Length(format!("masks cover {offset} of {} targets", targets.len())));
        }
        w
    };
    if flat.iter().all(|&w| w == 0.0) {
        return Err(CurriculumError::EmptySupervision);
    }
    Ok(g.cross_entropy(logits, targets, &flat)?)
}

fn check_maskable(len: usize, maskable: &[usize]) -> Result<()> {
    if let Some(&p) = maskable.iter().find(|&&p| p >= len) {
        return Err(CurriculumError::Length(format!("maskable position {p} outside grid of {len}")));
    }
    Ok(())
}
