//! Single-encoder harmonization transformer.
//!
//! Melody columns and harmony tokens share one encoder input:
//! `[ts?] [melody_0 .. melody_{L-1}] [harmony_0 .. harmony_{L-1}]`.
//! Both halves receive the same fixed sinusoidal position table, so melody
//! column `t` and harmony position `t` carry identical position codes.

mod attention;
mod checkpoint;

pub use attention::{cross_quadrant, mean_attention, AttentionCapture};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::repr::{BarMode, TokenId, TS_VECTOR_LEN, VOCAB_SIZE};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input mismatch: {0}")]
    Input(String),
    #[error("token id {0} outside vocabulary of {VOCAB_SIZE}")]
    UnknownToken(TokenId),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_mult: usize,
    /// Grid length `L` (harmony positions per piece).
    pub max_len: usize,
    /// Melody-roll feature width `D`.
    pub melody_dim: usize,
    pub vocab_size: usize,
    pub bar_mode: BarMode,
    /// Adds a learned stage embedding to every harmony position.
    pub use_stage_embedding: bool,
    /// Largest stage index accepted when stage embeddings are on.
    pub max_stage: usize,
    pub activation: Activation,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} must be a positive multiple of n_heads {}", self.d_model, self.n_heads));
        }
        if self.max_len == 0 || self.melody_dim == 0 || self.ff_mult == 0 {
            return bad("max_len, melody_dim and ff_mult must be positive".into());
        }
        if self.vocab_size != VOCAB_SIZE {
            return bad(format!("vocab_size must be {VOCAB_SIZE}, got {}", self.vocab_size));
        }
        Ok(())
    }

    /// Offset of the first melody row in the encoder input.
    pub fn prefix_len(&self) -> usize {
        usize::from(self.bar_mode == BarMode::Ts)
    }

    /// Encoder input length: `2L` in bar mode, `1 + 2L` in ts mode.
    pub fn seq_len(&self) -> usize {
        self.prefix_len() + 2 * self.max_len
    }
}

/// One piece fed to the encoder.
#[derive(Clone, Copy, Debug)]
pub struct ModelInput<'a> {
    /// Row-major `max_len x melody_dim` binary roll.
    pub melody: &'a [u8],
    /// `max_len` harmony tokens, possibly containing mask tokens.
    pub harmony: &'a [TokenId],
    pub ts: Option<&'a [u8; TS_VECTOR_LEN]>,
    pub stage: Option<usize>,
}

/// Handles into a graph produced by [`Model::build`].
#[derive(Clone, Debug)]
pub struct Forward {
    /// Logits for harmony positions, `[batch * max_len, vocab]`.
    pub logits: Var,
    /// One attention node per encoder layer.
    pub attention: Vec<Var>,
    pub batch: usize,
}

#[derive(Clone, Debug)]
struct LayerIds {
    q_w: ParamId,
    q_b: ParamId,
    k_w: ParamId,
    k_b: ParamId,
    v_w: ParamId,
    v_b: ParamId,
    o_w: ParamId,
    o_b: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    ff1_w: ParamId,
    ff1_b: ParamId,
    ff2_w: ParamId,
    ff2_b: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

#[derive(Clone, Debug)]
struct Ids {
    melody_w: ParamId,
    melody_b: ParamId,
    harmony_embed: ParamId,
    input_w: ParamId,
    input_b: ParamId,
    ts: Option<(ParamId, ParamId)>,
    stage_embed: Option<ParamId>,
    layers: Vec<LayerIds>,
    head_w: ParamId,
    head_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    positional: Tensor,
    ids: Ids,
}

/// Fixed sinusoidal table of shape `[len, d]`.
pub fn sinusoidal_table(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![len, d], data).expect("table shape")
}

/// Parameter names and shapes for `config`, in creation order.
fn layout(config: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = config.d_model;
    let ff = d * config.ff_mult;
    let mut out = vec![
        ("melody_proj.weight".to_string(), vec![config.melody_dim, d], Init::Uniform(config.melody_dim)),
        ("melody_proj.bias".to_string(), vec![d], Init::Uniform(config.melody_dim)),
        ("harmony_embed".to_string(), vec![config.vocab_size, d], Init::Normal),
        ("input_proj.weight".to_string(), vec![d, d], Init::Uniform(d)),
        ("input_proj.bias".to_string(), vec![d], Init::Uniform(d)),
    ];
    if config.bar_mode == BarMode::Ts {
        out.push(("ts_proj.weight".into(), vec![TS_VECTOR_LEN, d], Init::Uniform(TS_VECTOR_LEN)));
        out.push(("ts_proj.bias".into(), vec![d], Init::Uniform(TS_VECTOR_LEN)));
    }
    if config.use_stage_embedding {
        out.push(("stage_embed".into(), vec![config.max_stage + 1, d], Init::Normal));
    }
    for l in 0..config.n_layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        for name in ["attn.q", "attn.k", "attn.v", "attn.out"] {
            out.push((p(&format!("{name}.weight")), vec![d, d], Init::Uniform(d)));
            out.push((p(&format!("{name}.bias")), vec![d], Init::Uniform(d)));
        }
        out.push((p("ln1.gamma"), vec![d], Init::Ones));
        out.push((p("ln1.beta"), vec![d], Init::Zeros));
        out.push((p("ff.in.weight"), vec![d, ff], Init::Uniform(d)));
        out.push((p("ff.in.bias"), vec![ff], Init::Uniform(d)));
        out.push((p("ff.out.weight"), vec![ff, d], Init::Uniform(ff)));
        out.push((p("ff.out.bias"), vec![d], Init::Uniform(ff)));
        out.push((p("ln2.gamma"), vec![d], Init::Ones));
        out.push((p("ln2.beta"), vec![d], Init::Zeros));
    }
    out.push(("head.weight".into(), vec![d, config.vocab_size], Init::Uniform(d)));
    out.push(("head.bias".into(), vec![config.vocab_size], Init::Uniform(d)));
    out
}

#[derive(Clone, Copy, Debug)]
enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    Uniform(usize),
    Normal,
    Ones,
    Zeros,
}

impl Model {
    /// Fresh model with parameters drawn from a seeded stream.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape, init) in layout(&config) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = match init {
                Init::Uniform(fan_in) => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                }
                Init::Normal => (0..n).map(|_| StandardNormal.sample(&mut rng)).collect(),
                Init::Ones => vec![1.0; n],
                Init::Zeros => vec![0.0; n],
            };
            params.insert(name, Tensor::new(shape, data)?)?;
        }
        Self::from_params(config, params)
    }

    /// Wraps an existing parameter set, checking names and shapes against `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config);
        if expected.len() != params.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape, _) in &expected {
            let id = params.id(name).ok_or_else(|| ModelError::Checkpoint(format!("missing tensor `{name}`")))?;
            if params.get(id).shape() != shape.as_slice() {
                return Err(ModelError::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, config expects {shape:?}",
                    params.get(id).shape()
                )));
            }
        }
        let id = |n: &str| params.id(n).expect("validated above");
        let layers = (0..config.n_layers)
            .map(|l| {
                let p = |s: &str| id(&format!("layers.{l}.{s}"));
                LayerIds {
                    q_w: p("attn.q.weight"),
                    q_b: p("attn.q.bias"),
                    k_w: p("attn.k.weight"),
                    k_b: p("attn.k.bias"),
                    v_w: p("attn.v.weight"),
                    v_b: p("attn.v.bias"),
                    o_w: p("attn.out.weight"),
                    o_b: p("attn.out.bias"),
                    ln1_g: p("ln1.gamma"),
                    ln1_b: p("ln1.beta"),
                    ff1_w: p("ff.in.weight"),
                    ff1_b: p("ff.in.bias"),
                    ff2_w: p("ff.out.weight"),
                    ff2_b: p("ff.out.bias"),
                    ln2_g: p("ln2.gamma"),
                    ln2_b: p("ln2.beta"),
                }
            })
            .collect();
        let ids = Ids {
            melody_w: id("melody_proj.weight"),
            melody_b: id("melody_proj.bias"),
            harmony_embed: id("harmony_embed"),
            input_w: id("input_proj.weight"),
            input_b: id("input_proj.bias"),
            ts: (config.bar_mode == BarMode::Ts).then(|| (id("ts_proj.weight"), id("ts_proj.bias"))),
            stage_embed: config.use_stage_embedding.then(|| id("stage_embed")),
            layers,
            head_w: id("head.weight"),
            head_b: id("head.bias"),
        };
        let positional = sinusoidal_table(config.max_len, config.d_model);
        Ok(Self { config, params, positional, ids })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// The fixed position table `p` (`[max_len, d_model]`).
    pub fn positional(&self) -> &Tensor {
        &self.positional
    }

    fn check_input(&self, input: &ModelInput<'_>) -> Result<()> {
        let c = &self.config;
        if input.harmony.len() != c.max_len {
            return Err(ModelError::Input(format!("harmony length {} != L = {}", input.harmony.len(), c.max_len)));
        }
        if input.melody.len() != c.max_len * c.melody_dim {
            return Err(ModelError::Input(format!(
                "melody roll has {} cells, expected {} x {}",
                input.melody.len(),
                c.max_len,
                c.melody_dim
            )));
        }
        if let Some(&bad) = input.harmony.iter().find(|&&t| t >= c.vocab_size) {
            return Err(ModelError::UnknownToken(bad));
        }
        match (c.bar_mode, input.ts.is_some()) {
            (BarMode::Ts, false) => return Err(ModelError::Input("ts mode needs a time-signature vector".into())),
            (BarMode::Bar, true) => return Err(ModelError::Input("bar mode takes no time-signature vector".into())),
            _ => {}
        }
        match (c.use_stage_embedding, input.stage) {
            (true, None) => return Err(ModelError::Input("model expects a stage index".into())),
            (true, Some(k)) if k > c.max_stage => {
                return Err(ModelError::Input(format!("stage {k} exceeds max_stage {}", c.max_stage)))
            }
            _ => {}
        }
        Ok(())
    }

    /// Records a batched forward pass on `g`.
    pub fn build(&self, g: &mut Graph, batch: &[ModelInput<'_>]) -> Result<Forward> {
        if batch.is_empty() {
            return Err(ModelError::Input("empty batch".into()));
        }
        for item in batch {
            self.check_input(item)?;
        }
        let c = &self.config;
        let (b, l, d) = (batch.len(), c.max_len, c.d_model);
        let seq = c.seq_len();
        let pre = c.prefix_len();
        let ids = &self.ids;
        let p = |g: &mut Graph, id: ParamId| g.param(&self.params, id);

        let melody: Vec<f64> = batch.iter().flat_map(|x| x.melody.iter().map(|&v| v as f64)).collect();
        let melody = g.constant(Tensor::new(vec![b * l, c.melody_dim], melody)?);
        let (mw, mb) = (p(g, ids.melody_w), p(g, ids.melody_b));
        let mel = g.linear(melody, mw, Some(mb))?;

        let tokens: Vec<TokenId> = batch.iter().flat_map(|x| x.harmony.iter().copied()).collect();
        let table = p(g, ids.harmony_embed);
        let mut har = g.embedding(table, &tokens)?;
        if let Some(stage_id) = ids.stage_embed {
            let stages: Vec<usize> =
                batch.iter().flat_map(|x| std::iter::repeat_n(x.stage.unwrap_or(0), l)).collect();
            let st_table = p(g, stage_id);
            let st = g.embedding(st_table, &stages)?;
            har = g.add(har, st)?;
        }
        let ts_rows = match ids.ts {
            Some((tw, tb)) => {
                let tsv: Vec<f64> =
                    batch.iter().flat_map(|x| x.ts.expect("checked").iter().map(|&v| v as f64)).collect();
                let tsv = g.constant(Tensor::new(vec![b, TS_VECTOR_LEN], tsv)?);
                let (tw, tb) = (p(g, tw), p(g, tb));
                Some(g.linear(tsv, tw, Some(tb))?)
            }
            None => None,
        };

        let mut parts = Vec::with_capacity(3 * b);
        for i in 0..b {
            if let Some(ts) = ts_rows {
                parts.push(g.slice_rows(ts, i, i + 1)?);
            }
            parts.push(g.slice_rows(mel, i * l, (i + 1) * l)?);
            parts.push(g.slice_rows(har, i * l, (i + 1) * l)?);
        }
        let z = g.concat_rows(&parts)?;
        let mut pos = vec![0.0; b * seq * d];
        for i in 0..b {
            for half in 0..2 {
                let row0 = i * seq + pre + half * l;
                pos[row0 * d..(row0 + l) * d].copy_from_slice(self.positional.data());
            }
        }
        let pos = g.constant(Tensor::new(vec![b * seq, d], pos)?);
        let z = g.add(z, pos)?;
        let (iw, ib) = (p(g, ids.input_w), p(g, ids.input_b));
        let mut x = g.linear(z, iw, Some(ib))?;

        let mut attention = Vec::with_capacity(c.n_layers);
        for layer in &ids.layers {
            let lin = |g: &mut Graph, x: Var, w: ParamId, bias: ParamId| -> Result<Var> {
                let (w, bias) = (g.param(&self.params, w), g.param(&self.params, bias));
                Ok(g.linear(x, w, Some(bias))?)
            };
            let q = lin(g, x, layer.q_w, layer.q_b)?;
            let k = lin(g, x, layer.k_w, layer.k_b)?;
            let v = lin(g, x, layer.v_w, layer.v_b)?;
            let att = g.attention(q, k, v, b, c.n_heads)?;
            attention.push(att);
            let o = lin(g, att, layer.o_w, layer.o_b)?;
            let res = g.add(x, o)?;
            let (g1, b1) = (p(g, layer.ln1_g), p(g, layer.ln1_b));
            let h = g.layer_norm(res, g1, b1)?;
            let f = lin(g, h, layer.ff1_w, layer.ff1_b)?;
            let f = match c.activation {
                Activation::Gelu => g.gelu(f),
                Activation::Relu => g.relu(f),
            };
            let f = lin(g, f, layer.ff2_w, layer.ff2_b)?;
            let res = g.add(h, f)?;
            let (g2, b2) = (p(g, layer.ln2_g), p(g, layer.ln2_b));
            x = g.layer_norm(res, g2, b2)?;
        }

        let harmony_rows: Vec<Var> = (0..b)
            .map(|i| {
                let start = i * seq + pre + l;
                g.slice_rows(x, start, start + l)
            })
            .collect::<std::result::Result<_, _>>()?;
        let hx = g.concat_rows(&harmony_rows)?;
        let (hw, hb) = (p(g, ids.head_w), p(g, ids.head_b));
        let logits = g.linear(hx, hw, Some(hb))?;
        Ok(Forward { logits, attention, batch: b })
    }

    /// Single-piece inference: logits `[max_len, vocab]` and, optionally,
    /// every layer's attention maps.
    pub fn forward(&self, input: &ModelInput<'_>, capture: bool) -> Result<(Tensor, Option<AttentionCapture>)> {
        let mut g = Graph::new();
        let fwd = self.build(&mut g, std::slice::from_ref(input))?;
        let cap = capture.then(|| {
            let maps = fwd
                .attention
                .iter()
                .flat_map(|&a| g.attention_probs(a).expect("attention node").iter().copied())
                .collect();
            AttentionCapture::new(self.config.n_layers, self.config.n_heads, self.config.seq_len(), maps)
        });
        Ok((g.value(fwd.logits).clone(), cap))
    }

    /// Serializes configuration and parameters.
    pub fn to_checkpoint(&self, extra_header: serde_json::Value) -> Checkpoint {
        let mut header = serde_json::json!({ "model": self.config });
        if let (Some(h), serde_json::Value::Object(extra)) = (header.as_object_mut(), extra_header) {
            h.extend(extra);
        }
        Checkpoint {
            header,
            tensors: self.params.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    /// Rebuilds a model from a checkpoint, ignoring tensors not named by the config
    /// (optimizer moments, for instance).
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: ModelConfig = serde_json::from_value(
            ck.header.get("model").cloned().ok_or_else(|| ModelError::Checkpoint("header lacks `model`".into()))?,
        )
        .map_err(|e| ModelError::Checkpoint(format!("bad model config: {e}")))?;
        let mut params = ParamStore::new();
        for (name, _, _) in layout(&config) {
            let t = ck
                .tensor(&name)
                .ok_or_else(|| ModelError::Checkpoint(format!("missing tensor `{name}`")))?;
            params.insert(name, t.clone())?;
        }
        Self::from_params(config, params)
    }
}
