use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{HarnessError, Result, TrainConfig};
use crate::curriculum::{apply_mask, mlm_loss, mlm_loss_node, supervision_weights, CurriculumKind, MaskState};
use crate::model::{Checkpoint, Model, ModelInput};
use crate::repr::{encode, EncodedPair, GridConfig, LeadSheet, TokenId};
use crate::rng::derive_rng;
use crate::tensor::{AdamW, Graph, ParamStore, Tensor};

const TAG_SHUFFLE: u64 = 1;
const TAG_MASK: u64 = 2;
const TAG_SPLIT: u64 = 3;

/// Grid-encoded pieces plus their maskable (chord-slot) positions.
#[derive(Clone, Debug, Default)]
pub struct EncodedCorpus {
    pub items: Vec<EncodedPair>,
    pub maskable: Vec<Vec<usize>>,
}

impl EncodedCorpus {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

pub fn encode_corpus(sheets: &[LeadSheet], grid: &GridConfig) -> Result<EncodedCorpus> {
    let mut out = EncodedCorpus::default();
    for (i, s) in sheets.iter().enumerate() {
        let enc = encode(s, grid).map_err(|e| HarnessError::Corpus(format!("piece {i}: {e}")))?;
        let maskable = enc.layout.chord_positions();
        if maskable.is_empty() {
            return Err(HarnessError::Corpus(format!("piece {i} has no chord positions")));
        }
        out.items.push(enc);
        out.maskable.push(maskable);
    }
    Ok(out)
}

/// Deterministically holds out `fraction` of `sheets` for validation.
pub fn split_validation(sheets: &[LeadSheet], fraction: f64, seed: u64) -> (Vec<LeadSheet>, Vec<LeadSheet>) {
    let n_val = (sheets.len() as f64 * fraction).round() as usize;
    let mut order: Vec<usize> = (0..sheets.len()).collect();
    order.shuffle(&mut derive_rng(seed, &[TAG_SPLIT]));
    let mut is_val = vec![false; sheets.len()];
    for &i in &order[..n_val] {
        is_val[i] = true;
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (s, v) in sheets.iter().zip(is_val) {
        if v { val.push(s.clone()) } else { train.push(s.clone()) }
    }
    (train, val)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub seed: u64,
    pub step_losses: Vec<f64>,
    /// One entry per completed epoch (absent when there is no validation set).
    pub val_losses: Vec<f64>,
    pub wall_time_secs: f64,
    pub epochs_completed: usize,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

#[derive(Clone, Debug)]
struct Best {
    val_loss: f64,
    epoch: usize,
    params: ParamStore,
}

pub struct TrainOutcome {
    pub model: Model,
    pub checkpoint: Checkpoint,
    pub record: RunRecord,
}

/// Epoch-at-a-time training loop. All randomness is keyed by
/// `(seed, step, item)`, so the counters alone are enough to resume.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    train: &'a EncodedCorpus,
    val: &'a EncodedCorpus,
    model: Model,
    opt: AdamW,
    epoch: usize,
    step: u64,
    record: RunRecord,
    best: Option<Best>,
    since_best: usize,
    stopped: bool,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &TrainConfig, train: &'a EncodedCorpus, val: &'a EncodedCorpus) -> Result<Self> {
        cfg.validate()?;
        check_corpus(cfg, train)?;
        check_corpus(cfg, val)?;
        if train.is_empty() {
            return Err(HarnessError::Corpus("empty training corpus".into()));
        }
        let model = Model::new(cfg.model_config(), cfg.seed)?;
        let opt = AdamW::new(cfg.adamw(), model.params());
        let record = RunRecord {
            config_hash: cfg.hash(),
            seed: cfg.seed,
            step_losses: Vec::new(),
            val_losses: Vec::new(),
            wall_time_secs: 0.0,
            epochs_completed: 0,
            best_epoch: None,
            stopped_early: false,
        };
        Ok(Self {
            cfg: cfg.clone(),
            train,
            val,
            model,
            opt,
            epoch: 0,
            step: 0,
            record,
            best: None,
            since_best: 0,
            stopped: false,
        })
    }

    /// Continues from a state written by [`Trainer::state_checkpoint`].
    pub fn resume(cfg: &TrainConfig, train: &'a EncodedCorpus, val: &'a EncodedCorpus, ck: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(cfg, train, val)?;
        let h = &ck.header;
        if h.get("kind").and_then(|k| k.as_str()) != Some("train_state") {
            return Err(HarnessError::Mismatch("not a training-state checkpoint".into()));
        }
        if h.get("config_hash").and_then(|k| k.as_str()) != Some(cfg.hash().as_str()) {
            return Err(HarnessError::Mismatch("training state was produced by a different config".into()));
        }
        let field = |name: &str| h.get(name).cloned().ok_or_else(|| HarnessError::Mismatch(format!("missing `{name}`")));
        let json = |e: serde_json::Error| HarnessError::Mismatch(e.to_string());
        t.model = Model::from_checkpoint(ck)?;
        t.epoch = serde_json::from_value(field("epoch")?).map_err(json)?;
        t.step = serde_json::from_value(field("step")?).map_err(json)?;
        t.record = serde_json::from_value(field("record")?).map_err(json)?;
        t.since_best = serde_json::from_value(field("since_best")?).map_err(json)?;
        t.stopped = serde_json::from_value(field("stopped")?).map_err(json)?;
        let adam_step: u64 = serde_json::from_value(field("adam_step")?).map_err(json)?;
        let named = |prefix: &str| -> Result<Vec<Tensor>> {
            t.model
                .params()
                .iter()
                .map(|(_, name, _)| {
                    ck.tensor(&format!("{prefix}{name}"))
                        .cloned()
                        .ok_or_else(|| HarnessError::Mismatch(format!("missing `{prefix}{name}`")))
                })
                .collect()
        };
        let m = named("adamw.m.")?.into_iter().map(Tensor::into_data).collect();
        let v = named("adamw.v.")?.into_iter().map(Tensor::into_data).collect();
        t.opt = AdamW::from_state(cfg.adamw(), adam_step, m, v, t.model.params())?;
        if let Some(best_val) = h.get("best_val").and_then(|b| b.as_f64()) {
            let mut params = t.model.params().clone();
            for (tensor, id) in named("best.")?.into_iter().zip(params.ids().collect::<Vec<_>>()) {
                *params.get_mut(id) = tensor;
            }
            let epoch = serde_json::from_value(field("best_epoch")?).map_err(json)?;
            t.best = Some(Best { val_loss: best_val, epoch, params });
        }
        Ok(t)
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn record(&self) -> &RunRecord {
        &self.record
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.train.len().div_ceil(self.cfg.batch_size)
    }

    pub fn total_steps(&self) -> u64 {
        (self.cfg.epochs * self.batches_per_epoch()) as u64
    }

    pub fn is_done(&self) -> bool {
        self.stopped || self.epoch >= self.cfg.epochs
    }

    fn mask_for(&self, item: usize, rng_key: &[u64], seed: u64, step: u64, corpus: &EncodedCorpus) -> Result<MaskState> {
        let spec = self.cfg.curriculum_spec();
        let mut rng = derive_rng(seed, rng_key);
        let len = corpus.items[item].len();
        Ok(spec.training_mask(&mut rng, step, self.total_steps(), len, &corpus.maskable[item])?)
    }

    fn inputs<'b>(&self, corpus: &'b EncodedCorpus, idx: &[usize], masked: &'b [Vec<TokenId>], states: &[MaskState]) -> Vec<ModelInput<'b>> {
        idx.iter()
            .zip(masked)
            .zip(states)
            .map(|((&i, h), s)| {
                let item = &corpus.items[i];
                ModelInput {
                    melody: &item.melody_roll,
                    harmony: h,
                    ts: item.ts_vector.as_ref(),
                    stage: self.cfg.stage_embedding.then_some(s.stage),
                }
            })
            .collect()
    }

    /// One optimizer step on the given training items; returns the batch loss.
    pub fn train_step(&mut self, idx: &[usize]) -> Result<f64> {
        let step = self.step;
        let states = idx
            .iter()
            .map(|&i| self.mask_for(i, &[TAG_MASK, step, i as u64], self.cfg.seed, step, self.train))
            .collect::<Result<Vec<_>>>()?;
        let masked = idx
            .iter()
            .zip(&states)
            .map(|(&i, s)| apply_mask(&self.train.items[i].harmony, s))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let targets: Vec<TokenId> = idx.iter().flat_map(|&i| self.train.items[i].harmony.iter().copied()).collect();
        let inputs = self.inputs(self.train, idx, &masked, &states);
        let mut g = Graph::new();
        let fwd = self.model.build(&mut g, &inputs)?;
        let loss = mlm_loss_node(&mut g, fwd.logits, &targets, &states)?;
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(HarnessError::NonFinite { what: "loss", step, value });
        }
        let grads = g.backward(loss)?;
        let grads = g.param_grads(&grads, self.model.params().len());
        if !grads.all_finite() {
            return Err(HarnessError::NonFinite { what: "gradient norm", step, value: grads.global_norm() });
        }
        self.opt.step(self.model.params_mut(), &grads)?;
        self.step += 1;
        self.record.step_losses.push(value);
        Ok(value)
    }

    /// Mean loss per supervised token on the validation corpus, with masks
    /// drawn from a fixed validation seed (fully masked for FF).
    pub fn validation_loss(&self) -> Result<Option<f64>> {
        if self.val.is_empty() {
            return Ok(None);
        }
        let (mut total, mut count) = (0.0, 0.0);
        let all: Vec<usize> = (0..self.val.len()).collect();
        for idx in all.chunks(self.cfg.batch_size) {
            let states = idx
                .iter()
                .map(|&i| self.mask_for(i, &[i as u64], self.cfg.val_seed, 0, self.val))
                .collect::<Result<Vec<_>>>()?;
            let masked = idx
                .iter()
                .zip(&states)
                .map(|(&i, s)| apply_mask(&self.val.items[i].harmony, s))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let inputs = self.inputs(self.val, idx, &masked, &states);
            let mut g = Graph::new();
            let fwd = self.model.build(&mut g, &inputs)?;
            let logits = g.value(fwd.logits);
            let l = self.cfg.max_len;
            for (b, (&i, s)) in idx.iter().zip(&states).enumerate() {
                let rows = Tensor::new(vec![l, logits.row_len()], logits.data()[b * l * logits.row_len()..(b + 1) * l * logits.row_len()].to_vec())?;
                let target = &self.val.items[i].harmony;
                let n: f64 = supervision_weights(target, s).iter().sum();
                total += mlm_loss(&rows, target, s)? * n;
                count += n;
            }
        }
        Ok(Some(total / count))
    }

    /// Runs one epoch plus validation and early-stopping bookkeeping.
    pub fn run_epoch(&mut self) -> Result<()> {
        if self.is_done() {
            return Ok(());
        }
        let started = Instant::now();
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut derive_rng(self.cfg.seed, &[TAG_SHUFFLE, self.epoch as u64]));
        let first = self.record.step_losses.len();
        for idx in order.chunks(self.cfg.batch_size) {
            self.train_step(idx)?;
        }
        self.epoch += 1;
        self.record.epochs_completed = self.epoch;
        let train_loss = mean(&self.record.step_losses[first..]);
        let val = self.validation_loss()?;
        if let Some(v) = val {
            self.record.val_losses.push(v);
            if self.best.as_ref().is_none_or(|b| v < b.val_loss) {
                self.best = Some(Best { val_loss: v, epoch: self.epoch, params: self.model.params().clone() });
                self.record.best_epoch = Some(self.epoch);
                self.since_best = 0;
            } else {
                self.since_best += 1;
            }
            if self.cfg.keeps_best_val() && self.cfg.patience > 0 && self.since_best >= self.cfg.patience {
                info!("early stop after epoch {}: no improvement for {} epochs", self.epoch, self.since_best);
                self.stopped = true;
                self.record.stopped_early = true;
            }
        }
        self.record.wall_time_secs += started.elapsed().as_secs_f64();
        info!(
            "epoch {}/{} step {} train {:.4} val {} ({:.1}s)",
            self.epoch,
            self.cfg.epochs,
            self.step,
            train_loss,
            val.map_or("-".into(), |v| format!("{v:.4}")),
            started.elapsed().as_secs_f64()
        );
        Ok(())
    }

    fn header(&self, kind: &str) -> serde_json::Value {
        serde_json::json!({
            "kind": kind,
            "grid": self.cfg.grid(),
            "train_config": self.cfg,
            "config_hash": self.cfg.hash(),
            "epoch": self.epoch,
            "step": self.step,
        })
    }

    /// Full resumable state: parameters, optimizer moments, best-so-far model and counters.
    pub fn state_checkpoint(&self) -> Checkpoint {
        let mut ck = self.model.to_checkpoint(self.header("train_state"));
        let h = ck.header.as_object_mut().expect("object header");
        h.insert("record".into(), serde_json::to_value(&self.record).expect("record serializes"));
        h.insert("since_best".into(), self.since_best.into());
        h.insert("stopped".into(), self.stopped.into());
        h.insert("adam_step".into(), self.opt.step_count().into());
        if let Some(b) = &self.best {
            h.insert("best_val".into(), b.val_loss.into());
            h.insert("best_epoch".into(), b.epoch.into());
        }
        let params = self.model.params();
        for (i, (_, name, t)) in params.iter().enumerate() {
            for (prefix, moments) in [("adamw.m.", self.opt.first_moments()), ("adamw.v.", self.opt.second_moments())] {
                let data = moments[i].clone();
                ck.tensors.push((format!("{prefix}{name}"), Tensor::new(t.shape().to_vec(), data).expect("moment shape")));
            }
        }
        if let Some(b) = &self.best {
            for (_, name, t) in b.params.iter() {
                ck.tensors.push((format!("best.{name}"), t.clone()));
            }
        }
        ck
    }

    /// The model selected by the checkpoint policy.
    pub fn finish(self) -> Result<TrainOutcome> {
        let model = match (&self.best, self.cfg.keeps_best_val()) {
            (Some(b), true) => Model::from_params(self.cfg.model_config(), b.params.clone())?,
            (None, true) => {
                warn!("best-validation policy without a validation set; keeping the last model");
                self.model.clone()
            }
            _ => self.model.clone(),
        };
        let checkpoint = model.to_checkpoint(self.header("model"));
        Ok(TrainOutcome { model, checkpoint, record: self.record })
    }
}

fn check_corpus(cfg: &TrainConfig, corpus: &EncodedCorpus) -> Result<()> {
    let grid = cfg.grid();
    for (i, item) in corpus.items.iter().enumerate() {
        if item.len() != grid.max_len || item.melody_dim != grid.melody_dim() {
            return Err(HarnessError::Corpus(format!(
                "item {i} encoded as {} x {}, config expects {} x {}",
                item.len(),
                item.melody_dim,
                grid.max_len,
                grid.melody_dim()
            )));
        }
    }
    Ok(())
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() { f64::NAN } else { xs.iter().sum::<f64>() / xs.len() as f64 }
}

pub fn load_train_state(path: &Path) -> Result<Checkpoint> {
    Ok(Checkpoint::load(path)?)
}

fn write_atomic(path: &Path, ck: &Checkpoint) -> Result<()> {
    let tmp = path.with_extension("tmp");
    ck.save(&tmp)?;
    std::fs::rename(&tmp, path).map_err(|e| HarnessError::io(path, e))
}

/// Trains to completion. With `out_dir`, writes `config.toml`, a resumable
/// `state.ckpt` after every epoch, and finally `model.ckpt` and `run.json`.
/// When `resume` is set and `state.ckpt` exists, training continues from it.
pub fn train(
    cfg: &TrainConfig,
    train_set: &[LeadSheet],
    val_set: &[LeadSheet],
    out_dir: Option<&Path>,
    resume: bool,
) -> Result<TrainOutcome> {
    let grid = cfg.grid();
    let train_enc = encode_corpus(train_set, &grid)?;
    let val_enc = encode_corpus(val_set, &grid)?;
    let state_path = out_dir.map(|d| d.join("state.ckpt"));
    let mut trainer = match &state_path {
        Some(p) if resume && p.exists() => {
            info!("resuming from {}", p.display());
            Trainer::resume(cfg, &train_enc, &val_enc, &load_train_state(p)?)?
        }
        _ => Trainer::new(cfg, &train_enc, &val_enc)?,
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        std::fs::write(dir.join("config.toml"), cfg.to_toml()).map_err(|e| HarnessError::io(dir, e))?;
    }
    if cfg.curriculum == CurriculumKind::Ff {
        info!("FF schedule over {} steps", trainer.total_steps());
    }
    while !trainer.is_done() {
        trainer.run_epoch()?;
        if let Some(p) = &state_path {
            write_atomic(p, &trainer.state_checkpoint())?;
        }
    }
    let outcome = trainer.finish()?;
    if let Some(dir) = out_dir {
        write_atomic(&dir.join("model.ckpt"), &outcome.checkpoint)?;
        let run = serde_json::to_string_pretty(&outcome.record).expect("record serializes");
        std::fs::write(dir.join("run.json"), run).map_err(|e| HarnessError::io(dir, e))?;
    }
    Ok(outcome)
}
