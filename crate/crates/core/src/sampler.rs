//! Iterative unmasking at inference time.
//!
//! Generation starts from a fully masked harmony (apart from user
//! constraints) and reveals positions over several model calls:
//!
//! * `uR10` reveals the `ceil(L/10)` most confident masked positions per call
//!   (fewer towards the end), so any piece of 10+ positions takes exactly 10 calls;
//! * `uMD` follows the midpoint-doubling schedule, `ceil(log2 L)` calls;
//! * `Seq` reveals one position per call, left to right, `L` calls.
//!
//! Revealed tokens are frozen. Tokens are drawn by nucleus sampling.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curriculum::md_schedule;
use crate::model::{Model, ModelError, ModelInput};
use crate::repr::{
    decode_harmony, encode, Chord, EncodedPair, GridConfig, LeadSheet, ReprError, TokenId, BAR_TOKEN, MASK_TOKEN,
    PAD_TOKEN,
};
use crate::tensor::Tensor;

/// Tokens never sampled at a chord position.
pub const EXCLUDED_TOKENS: [TokenId; 3] = [PAD_TOKEN, BAR_TOKEN, MASK_TOKEN];

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid sampler config: {0}")]
    Config(String),
    #[error("constraint at position {position}: {reason}")]
    Constraint { position: usize, reason: String },
    #[error("constraints: {0}")]
    ConstraintFile(String),
    #[error("every token of the row is excluded")]
    EmptyDistribution,
    #[error("non-finite logit at token {0}")]
    NonFinite(TokenId),
    #[error("nothing left to reveal")]
    NothingMasked,
    #[error("predictor returned {got:?}, expected [{len}, vocab]")]
    Shape { got: Vec<usize>, len: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Repr(#[from] ReprError),
}

pub type Result<T> = std::result::Result<T, SamplerError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "ur10")]
    UR10,
    #[serde(rename = "umd")]
    UMD,
    #[serde(rename = "seq")]
    Seq,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::UR10 => "ur10",
            Strategy::UMD => "umd",
            Strategy::Seq => "seq",
        })
    }
}

impl FromStr for Strategy {
    type Err = SamplerError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ur10" | "ur10%" => Ok(Strategy::UR10),
            "umd" => Ok(Strategy::UMD),
            "seq" => Ok(Strategy::Seq),
            _ => Err(SamplerError::Config(format!("unknown strategy `{s}` (expected ur10, umd or seq)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub strategy: Strategy,
    pub top_p: f64,
    pub temperature: f64,
    pub rng_seed: u64,
}

impl SamplerConfig {
    pub fn new(strategy: Strategy, rng_seed: u64) -> Self {
        Self { strategy, top_p: 0.9, temperature: 0.2, rng_seed }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(SamplerError::Config(format!("top_p must be in (0, 1], got {}", self.top_p)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(SamplerError::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }
}

/// Chords fixed in advance, keyed by grid position.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConstraintSet {
    pub fixed: BTreeMap<usize, TokenId>,
}

impl ConstraintSet {
    /// Parses `{"12": "C:maj7", "20": "N"}`.
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: BTreeMap<String, String> =
            serde_json::from_str(text).map_err(|e| SamplerError::ConstraintFile(e.to_string()))?;
        let mut fixed = BTreeMap::new();
        for (k, v) in raw {
            let position: usize =
                k.trim().parse().map_err(|_| SamplerError::ConstraintFile(format!("`{k}` is not a grid position")))?;
            let chord: Chord = v.parse()?;
            fixed.insert(position, chord.token());
        }
        Ok(Self { fixed })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SamplerError::ConstraintFile(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn is_empty(&self) -> bool {
        self.fixed.is_empty()
    }

    /// Every constraint must sit on a chord slot and name a chord or no-chord.
    pub fn check(&self, maskable: &[usize]) -> Result<()> {
        for (&position, &token) in &self.fixed {
            if maskable.binary_search(&position).is_err() {
                return Err(SamplerError::Constraint { position, reason: "not a chord position (bar, pad or out of range)".into() });
            }
            if Chord::from_token(token).is_none() {
                return Err(SamplerError::Constraint { position, reason: format!("token {token} is not a chord") });
            }
        }
        Ok(())
    }
}

/// Anything that maps a (partially masked) harmony to per-position logits.
pub trait Predictor {
    /// Logits `[L, vocab]`; `call` is the zero-based model-call index.
    fn predict(&mut self, harmony: &[TokenId], call: usize) -> Result<Tensor>;
}

/// A model conditioned on one melody.
pub struct ModelPredictor<'a> {
    pub model: &'a Model,
    pub item: &'a EncodedPair,
}

impl Predictor for ModelPredictor<'_> {
    fn predict(&mut self, harmony: &[TokenId], call: usize) -> Result<Tensor> {
        let cfg = self.model.config();
        let input = ModelInput {
            melody: &self.item.melody_roll,
            harmony,
            ts: self.item.ts_vector.as_ref(),
            stage: cfg.use_stage_embedding.then_some(call.min(cfg.max_stage)),
        };
        Ok(self.model.forward(&input, false)?.0)
    }
}

/// Temperature softmax over the non-excluded tokens; excluded entries are 0.
pub fn tempered_probs(logits: &[f64], temperature: f64, excluded: &[TokenId]) -> Result<Vec<f64>> {
    if let Some(i) = logits.iter().position(|x| !x.is_finite()) {
        return Err(SamplerError::NonFinite(i));
    }
    let allowed = |i: usize| !excluded.contains(&i);
    let max = (0..logits.len()).filter(|&i| allowed(i)).map(|i| logits[i]).fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(SamplerError::EmptyDistribution);
    }
    let mut p: Vec<f64> =
        (0..logits.len()).map(|i| if allowed(i) { ((logits[i] - max) / temperature).exp() } else { 0.0 }).collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= z);
    Ok(p)
}

/// The truncated, renormalized distribution nucleus sampling draws from:
/// the smallest set of most probable tokens whose mass reaches `top_p`.
/// Ordered by descending probability (ties by token id).
pub fn nucleus_set(logits: &[f64], top_p: f64, temperature: f64, excluded: &[TokenId]) -> Result<Vec<(TokenId, f64)>> {
    let probs = tempered_probs(logits, temperature, excluded)?;
    let mut order: Vec<TokenId> = (0..probs.len()).filter(|i| !excluded.contains(i)).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut set = Vec::new();
    let mut mass = 0.0;
    for i in order {
        set.push((i, probs[i]));
        mass += probs[i];
        if mass >= top_p {
            break;
        }
    }
    set.iter_mut().for_each(|(_, p)| *p /= mass);
    Ok(set)
}

/// Draws one token from the nucleus of `logits`.
pub fn nucleus_sample(logits: &[f64], top_p: f64, temperature: f64, excluded: &[TokenId], rng: &mut impl Rng) -> Result<TokenId> {
    let set = nucleus_set(logits, top_p, temperature, excluded)?;
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(i, p) in &set {
        acc += p;
        if u < acc {
            return Ok(i);
        }
    }
    // u fell into rounding slack past the last bucket.
    Ok(set.last().expect("non-empty nucleus").0)
}

pub const UR10_CALLS: usize = 10;

/// Number of positions uR10 reveals per call: `ceil(L/10)`.
pub fn ur10_step_size(maskable: usize) -> usize {
    maskable.div_ceil(UR10_CALLS).max(1)
}

/// Reveal count for call `call` (zero-based) with `remaining` masked
/// positions: `ceil(L/10)`, shrunk near the end so that each of the 10 calls
/// reveals at least one position whenever `L >= 10`.
pub fn ur10_reveal_count(maskable: usize, remaining: usize, call: usize) -> usize {
    let calls_after = UR10_CALLS.saturating_sub(call + 1);
    ur10_step_size(maskable).min(remaining.saturating_sub(calls_after)).max(1).min(remaining)
}

/// The `count` most confident positions among `masked` (ties: lowest index).
pub fn select_ur10(confidence: &[f64], masked: &[usize], count: usize) -> Result<Vec<usize>> {
    if masked.is_empty() {
        return Err(SamplerError::NothingMasked);
    }
    let mut order = masked.to_vec();
    order.sort_by(|&a, &b| confidence[b].total_cmp(&confidence[a]).then(a.cmp(&b)));
    order.truncate(count);
    order.sort_unstable();
    Ok(order)
}

/// Positions revealed at MD `stage` that are still masked; `maskable` maps
/// schedule indices to grid positions.
pub fn select_umd(maskable: &[usize], stage: usize, still_masked: &[bool]) -> Vec<usize> {
    let schedule = md_schedule(maskable.len());
    schedule
        .get(stage)
        .map(|s| s.iter().map(|&i| maskable[i]).filter(|&p| still_masked[p]).collect())
        .unwrap_or_default()
}

/// Runs a strategy to completion. `start` holds bar/pad tokens at structural
/// columns; every position in `maskable` is generated unless constrained.
/// Returns the tokens and the number of predictor calls.
pub fn unmask(
    predictor: &mut impl Predictor,
    start: &[TokenId],
    maskable: &[usize],
    cfg: &SamplerConfig,
    constraints: &ConstraintSet,
    rng: &mut impl Rng,
) -> Result<(Vec<TokenId>, usize)> {
    cfg.validate()?;
    constraints.check(maskable)?;
    let len = start.len();
    let mut tokens = start.to_vec();
    let mut masked = vec![false; len];
    for &p in maskable {
        match constraints.fixed.get(&p) {
            Some(&t) => tokens[p] = t,
            None => {
                tokens[p] = MASK_TOKEN;
                masked[p] = true;
            }
        }
    }
    let mut calls = 0;
    let mut call = |tokens: &[TokenId], calls: &mut usize| -> Result<Tensor> {
        let logits = predictor.predict(tokens, *calls)?;
        *calls += 1;
        if logits.shape().len() != 2 || logits.rows() != len {
            return Err(SamplerError::Shape { got: logits.shape().to_vec(), len });
        }
        Ok(logits)
    };
    let mut reveal = |positions: &[usize], logits: &Tensor, tokens: &mut Vec<TokenId>, masked: &mut Vec<bool>| -> Result<()> {
        for &p in positions {
            tokens[p] = nucleus_sample(logits.row(p), cfg.top_p, cfg.temperature, &EXCLUDED_TOKENS, rng)?;
            masked[p] = false;
        }
        Ok(())
    };
    let remaining = |masked: &[bool]| -> Vec<usize> { (0..len).filter(|&p| masked[p]).collect() };

    match cfg.strategy {
        Strategy::UR10 => {
            loop {
                let open = remaining(&masked);
                if open.is_empty() {
                    break;
                }
                let logits = call(&tokens, &mut calls)?;
                let mut confidence = vec![0.0; len];
                for &p in &open {
                    let probs = tempered_probs(logits.row(p), cfg.temperature, &EXCLUDED_TOKENS)?;
                    confidence[p] = probs.iter().copied().fold(0.0, f64::max);
                }
                let k = ur10_reveal_count(maskable.len(), open.len(), calls - 1);
                let chosen = select_ur10(&confidence, &open, k)?;
                reveal(&chosen, &logits, &mut tokens, &mut masked)?;
            }
        }
        Strategy::UMD => {
            let stages = md_schedule(maskable.len()).len();
            for stage in 1..stages {
                let chosen = select_umd(maskable, stage, &masked);
                if chosen.is_empty() {
                    continue;
                }
                let logits = call(&tokens, &mut calls)?;
                reveal(&chosen, &logits, &mut tokens, &mut masked)?;
            }
        }
        Strategy::Seq => {
            for p in remaining(&masked) {
                let logits = call(&tokens, &mut calls)?;
                reveal(&[p], &logits, &mut tokens, &mut masked)?;
            }
        }
    }
    debug_assert!(remaining(&masked).is_empty());
    Ok((tokens, calls))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Harmonization {
    pub tokens: Vec<TokenId>,
    pub model_calls: usize,
    pub sheet: LeadSheet,
}

/// Generates harmony for an encoded melody.
pub fn harmonize_encoded(
    model: &Model,
    item: &EncodedPair,
    cfg: &SamplerConfig,
    constraints: &ConstraintSet,
    rng: &mut impl Rng,
) -> Result<(Vec<TokenId>, usize)> {
    let maskable = item.layout.chord_positions();
    let mut predictor = ModelPredictor { model, item };
    unmask(&mut predictor, &item.harmony, &maskable, cfg, constraints, rng)
}

/// Harmonizes the melody of `sheet` (its chords, if any, are ignored).
pub fn harmonize(
    model: &Model,
    grid: &GridConfig,
    sheet: &LeadSheet,
    cfg: &SamplerConfig,
    constraints: &ConstraintSet,
) -> Result<Harmonization> {
    if model.config().max_len != grid.max_len || model.config().melody_dim != grid.melody_dim() {
        return Err(SamplerError::Config("model and grid configurations disagree".into()));
    }
    let item = encode(&sheet.melody_only(), grid)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let (tokens, model_calls) = harmonize_encoded(model, &item, cfg, constraints, &mut rng)?;
    let chords = decode_harmony(&tokens, grid, sheet.time_signature);
    Ok(Harmonization { tokens, model_calls, sheet: LeadSheet { chords, ..sheet.clone() } })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::repr::{NC_TOKEN, VOCAB_SIZE};

    /// Random logits, counting its own calls.
    struct Noise {
        rng: ChaCha8Rng,
        calls: usize,
        len: usize,
    }

    impl Predictor for Noise {
        fn predict(&mut self, harmony: &[TokenId], _call: usize) -> Result<Tensor> {
            assert_eq!(harmony.len(), self.len);
            self.calls += 1;
            let data = (0..self.len * VOCAB_SIZE).map(|_| self.rng.random::<f64>() * 6.0).collect();
            Ok(Tensor::new(vec![self.len, VOCAB_SIZE], data).unwrap())
        }
    }

    fn run(strategy: Strategy, l: usize, constraints: &ConstraintSet) -> (Vec<TokenId>, usize, usize) {
        let mut p = Noise { rng: ChaCha8Rng::seed_from_u64(l as u64), calls: 0, len: l };
        let cfg = SamplerConfig::new(strategy, 0);
        let maskable: Vec<usize> = (0..l).collect();
        let start = vec![NC_TOKEN; l];
        let (t, c) = unmask(&mut p, &start, &maskable, &cfg, constraints, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        (t, c, p.calls)
    }

    #[test]
    fn call_counts() {
        for l in [2usize, 7, 10, 16, 32, 50, 64, 100, 256] {
            let none = ConstraintSet::default();
            let (t, c, own) = run(Strategy::UR10, l, &none);
            assert_eq!(c, own);
            assert_eq!(c, l.min(10), "uR10 L={l}");
            assert!(t.iter().all(|&x| !EXCLUDED_TOKENS.contains(&x)));
            let (_, c, _) = run(Strategy::UMD, l, &none);
            assert_eq!(c, (l as f64).log2().ceil() as usize, "uMD L={l}");
            let (_, c, _) = run(Strategy::Seq, l, &none);
            assert_eq!(c, l);
        }
    }

    #[test]
    fn ur10_reveal_sizes() {
        assert_eq!(ur10_step_size(64), 7);
        assert_eq!(ur10_step_size(10), 1);
        let sizes = |l: usize| {
            let mut remaining = l;
            (0..10)
                .map(|call| {
                    let k = ur10_reveal_count(l, remaining, call);
                    remaining -= k;
                    k
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(sizes(64), vec![7, 7, 7, 7, 7, 7, 7, 7, 7, 1]);
        assert_eq!(sizes(16), vec![2, 2, 2, 2, 2, 2, 1, 1, 1, 1]);
        assert_eq!(sizes(10), vec![1; 10]);
        let conf = vec![0.5; 6];
        assert_eq!(select_ur10(&conf, &[1, 3, 4, 5], 2).unwrap(), vec![1, 3]);
        let conf = vec![0.1, 0.9, 0.3, 0.9];
        assert_eq!(select_ur10(&conf, &[0, 1, 2, 3], 3).unwrap(), vec![1, 2, 3]);
        assert!(select_ur10(&conf, &[], 1).is_err());
    }

    #[test]
    fn umd_skips_constrained() {
        let maskable: Vec<usize> = (0..8).collect();
        let mut masked = vec![true; 8];
        assert_eq!(select_umd(&maskable, 1, &masked), vec![0, 4]);
        masked[4] = false;
        assert_eq!(select_umd(&maskable, 1, &masked), vec![0]);
        masked[0] = false;
        assert_eq!(select_umd(&maskable, 2, &masked), vec![2, 6]);
    }

    #[test]
    fn constraints_survive() {
        let mut c = ConstraintSet::default();
        c.fixed.insert(0, 5);
        c.fixed.insert(9, NC_TOKEN);
        for s in [Strategy::UR10, Strategy::UMD, Strategy::Seq] {
            let (t, _, _) = run(s, 16, &c);
            assert_eq!((t[0], t[9]), (5, NC_TOKEN));
        }
        let all = ConstraintSet { fixed: (0..4).map(|i| (i, i + 1)).collect() };
        let (t, calls, _) = run(Strategy::UR10, 4, &all);
        assert_eq!(t, vec![1, 2, 3, 4]);
        assert_eq!(calls, 0);
    }

    #[test]
    fn constraint_validation() {
        let c = ConstraintSet::from_json(r#"{"3": "C:maj7", "5": "N"}"#).unwrap();
        assert_eq!(c.fixed[&5], NC_TOKEN);
        assert!(c.check(&[1, 2, 3, 5]).is_ok());
        assert!(matches!(c.check(&[1, 2, 3]), Err(SamplerError::Constraint { position: 5, .. })));
        assert!(ConstraintSet::from_json(r#"{"x": "C:maj"}"#).is_err());
        assert!(ConstraintSet::from_json(r#"{"1": "C:weird"}"#).is_err());
    }

    #[test]
    fn nucleus_properties() {
        let mut logits = vec![0.0; VOCAB_SIZE];
        logits[7] = 10.0;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(nucleus_sample(&logits, 0.9, 0.2, &EXCLUDED_TOKENS, &mut rng).unwrap(), 7);
        }
        // Special tokens never win, even when they dominate.
        let mut special = vec![0.0; VOCAB_SIZE];
        special[MASK_TOKEN] = 100.0;
        special[3] = 20.0;
        assert_eq!(nucleus_sample(&special, 0.9, 1.0, &EXCLUDED_TOKENS, &mut rng).unwrap(), 3);
        let all: Vec<TokenId> = (0..4).collect();
        assert!(matches!(nucleus_sample(&[1.0; 4], 0.9, 1.0, &all, &mut rng), Err(SamplerError::EmptyDistribution)));
        assert!(nucleus_sample(&[f64::NAN, 1.0], 0.9, 1.0, &[], &mut rng).is_err());
    }

    #[test]
    fn nucleus_set_by_hand() {
        // probs 0.5, 0.3, 0.2 at T=1 -> p=0.7 keeps the first two, renormalized.
        let logits = [0.5f64.ln(), 0.3f64.ln(), 0.2f64.ln()];
        let set = nucleus_set(&logits, 0.7, 1.0, &[]).unwrap();
        assert_eq!(set.len(), 2);
        assert!((set[0].1 - 0.625).abs() < 1e-12 && (set[1].1 - 0.375).abs() < 1e-12);
    }

    #[test]
    fn strategy_parsing() {
        assert_eq!("uR10".parse::<Strategy>().unwrap(), Strategy::UR10);
        assert!("beam".parse::<Strategy>().is_err());
        let mut cfg = SamplerConfig::new(Strategy::Seq, 0);
        cfg.temperature = 0.0;
        assert!(cfg.validate().is_err());
    }
}
