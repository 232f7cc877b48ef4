//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! Nodes are appended in evaluation order, so the reverse pass is a single
//! backwards sweep over the tape.

use super::{gemm, ParamGrads, ParamId, ParamStore, Result, Tensor, TensorError, View};

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Gelu(Var),
    Relu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    Attention { q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize, probs: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<f64>, total: f64, probs: Vec<f64> },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable leaf that is not tied to a parameter store.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Copies a parameter onto the tape so its gradient can be collected.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id), true)
    }

    /// Attention probabilities recorded by an [`Graph::attention`] node,
    /// laid out as `[batch, heads, seq, seq]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let t = &self.nodes[v.0].value;
        t.expect_rank(op, 2)?;
        Ok((t.shape()[0], t.shape()[1]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(TensorError::ShapeMismatch { op, lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix("matmul", a)?;
        let (k2, n) = self.matrix("matmul", b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch { op: "matmul", lhs: vec![m, k], rhs: vec![k2, n] });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            1.0,
            self.value(a).data(),
            View::dense(0, m, k),
            self.value(b).data(),
            View::dense(0, k, n),
            0.0,
            &mut out,
            View::dense(0, m, n),
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMul(a, b), rg))
    }

    /// `x @ w + b` for `x: [n, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, i) = self.matrix("linear", x)?;
        let (i2, o) = self.matrix("linear", w)?;
        if i != i2 {
            return Err(TensorError::ShapeMismatch { op: "linear", lhs: vec![n, i], rhs: vec![i2, o] });
        }
        let mut out = vec![0.0; n * o];
        if let Some(b) = b {
            let bias = self.value(b);
            if bias.shape() != [o] {
                return Err(TensorError::ShapeMismatch { op: "linear bias", lhs: vec![o], rhs: bias.shape().to_vec() });
            }
            for row in out.chunks_mut(o) {
                row.copy_from_slice(bias.data());
            }
        }
        gemm(
            1.0,
            self.value(x).data(),
            View::dense(0, n, i),
            self.value(w).data(),
            View::dense(0, i, o),
            if b.is_some() { 1.0 } else { 0.0 },
            &mut out,
            View::dense(0, n, o),
        );
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(Tensor { shape: vec![n, o], data: out }, Op::Linear { x, w, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let va = self.value(a);
        let data = va.data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let t = Tensor { shape: va.shape().to_vec(), data };
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let va = self.value(a);
        let data = va.data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let t = Tensor { shape: va.shape().to_vec(), data };
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let va = self.value(a);
        let t = Tensor { shape: va.shape().to_vec(), data: va.data().iter().map(|x| x * factor).collect() };
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, factor), rg)
    }

    /// Adds a row vector `r: [c]` to every row of `a: [n, c]`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let (_, c) = self.matrix("add_row", a)?;
        if self.value(r).shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(r).shape().to_vec(),
            });
        }
        let row = self.value(r).data();
        let mut data = self.value(a).data().to_vec();
        for chunk in data.chunks_mut(c) {
            chunk.iter_mut().zip(row).for_each(|(x, y)| *x += y);
        }
        let t = Tensor { shape: self.value(a).shape().to_vec(), data };
        let rg = self.rg(&[a, r]);
        Ok(self.push(t, Op::AddRow(a, r), rg))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
            .collect();
        let t = Tensor { shape: va.shape().to_vec(), data };
        let rg = self.rg(&[a]);
        self.push(t, Op::Gelu(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let t = Tensor { shape: va.shape().to_vec(), data: va.data().iter().map(|x| x.max(0.0)).collect() };
        let rg = self.rg(&[a]);
        self.push(t, Op::Relu(a), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let w = *va.shape().last().ok_or(TensorError::Rank { op: "softmax", expected: 1, shape: vec![] })?;
        let mut data = va.data().to_vec();
        if w > 0 {
            data.chunks_mut(w).for_each(softmax_in_place);
        }
        let t = Tensor { shape: va.shape().to_vec(), data };
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Softmax(a), rg))
    }

    /// Row-wise layer normalization with affine `gamma`/`beta`.
    ///
    /// A constant row normalizes to zeros (the variance term is regularized
    /// by `1e-5`), so the output there is exactly `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (n, c) = self.matrix("layer_norm", x)?;
        for p in [gamma, beta] {
            if self.value(p).shape() != [c] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: vec![n, c],
                    rhs: self.value(p).shape().to_vec(),
                });
            }
        }
        let vx = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; n * c];
        let mut rstd = vec![0.0; n];
        let mut out = vec![0.0; n * c];
        for r in 0..n {
            let row = &vx[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor { shape: vec![n, c], data: out },
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
            rg,
        ))
    }

    /// Gathers rows of `table: [vocab, d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.matrix("embedding", table)?;
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::IndexOutOfRange { op: "embedding", index: id, bound: vocab });
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor { shape: vec![ids.len(), d], data: out },
            Op::Embedding { table, ids: ids.to_vec() },
            rg,
        ))
    }

    /// Concatenates along the leading axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| TensorError::Invalid("concat of zero tensors".into()))?;
        let tail: Vec<usize> = self.value(*first).shape().iter().skip(1).copied().collect();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let t = self.value(*p);
            if t.shape().is_empty() || t.shape()[1..] != tail[..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: self.value(*first).shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let rg = self.rg(parts);
        Ok(self.push(Tensor { shape, data }, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Rows `start..end` along the leading axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        let rows = t.rows();
        if t.shape().is_empty() || start > end || end > rows {
            return Err(TensorError::IndexOutOfRange { op: "slice", index: end, bound: rows });
        }
        let w = t.row_len();
        let mut shape = t.shape().to_vec();
        shape[0] = end - start;
        let data = t.data()[start * w..end * w].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor { shape, data }, Op::SliceRows { x, start }, rg))
    }

    /// Multi-head scaled dot-product attention without masking.
    ///
    /// `q`, `k`, `v` are `[batch * seq, d]` with heads occupying contiguous
    /// column blocks of width `d / heads`. Output has the same layout.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, heads: usize) -> Result<Var> {
        let (n, d) = self.matrix("attention", q)?;
        for other in [k, v] {
            if self.value(other).shape() != [n, d] {
                return Err(TensorError::ShapeMismatch {
                    op: "attention",
                    lhs: vec![n, d],
                    rhs: self.value(other).shape().to_vec(),
                });
            }
        }
        if batch == 0 || n % batch != 0 || heads == 0 || d % heads != 0 {
            return Err(TensorError::Invalid(format!(
                "attention: {n} rows x {d} cols not divisible into batch {batch} / heads {heads}"
            )));
        }
        let seq = n / batch;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; n * d];
        for b in 0..batch {
            for h in 0..heads {
                let base = (b * heads + h) * seq * seq;
                let head_view = View { offset: b * seq * d + h * dh, rows: seq, cols: dh, row_stride: d, col_stride: 1 };
                let p = &mut probs[base..base + seq * seq];
                gemm(scale, qd, head_view, kd, head_view.t(), 0.0, p, View::dense(0, seq, seq));
                p.chunks_mut(seq).for_each(softmax_in_place);
                gemm(1.0, p, View::dense(0, seq, seq), vd, head_view, 0.0, &mut out, head_view);
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            Tensor { shape: vec![n, d], data: out },
            Op::Attention { q, k, v, batch, seq, heads, probs },
            rg,
        ))
    }

    /// Weighted mean negative log-likelihood of `targets` under row-wise
    /// softmax of `logits: [n, vocab]`. Rows with zero weight are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let (n, vocab) = self.matrix("cross_entropy", logits)?;
        if targets.len() != n || weights.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: vec![n, vocab],
                rhs: vec![targets.len(), weights.len()],
            });
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(TensorError::Invalid("cross_entropy: no supervised rows".into()));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (r, row) in probs.chunks_mut(vocab).enumerate() {
            if weights[r] == 0.0 {
                continue;
            }
            let t = targets[r];
            if t >= vocab {
                return Err(TensorError::IndexOutOfRange { op: "cross_entropy", index: t, bound: vocab });
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += weights[r] * (lse - row[t]);
            row.iter_mut().for_each(|x| *x = (*x - lse).exp());
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss / total),
            Op::CrossEntropy { logits, targets: targets.to_vec(), weights: weights.to_vec(), total, probs },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { nodes: grads })
    }

    /// Sums gradients of every parameter node on the tape.
    pub fn param_grads(&self, grads: &Gradients, n_params: usize) -> ParamGrads {
        let mut out = ParamGrads::with_capacity(n_params);
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, grads.nodes.get(i).and_then(|g| g.as_deref())) {
                out.accumulate(*id, g);
            }
        }
        out
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[1];
                if self.requires_grad(*a) {
                    let bd = self.value(*b).data();
                    acc(grads, *a, m * k, |da| {
                        gemm(1.0, g, View::dense(0, m, n), bd, View::dense(0, k, n).t(), 1.0, da, View::dense(0, m, k))
                    });
                }
                if self.requires_grad(*b) {
                    let ad = self.value(*a).data();
                    acc(grads, *b, k * n, |db| {
                        gemm(1.0, ad, View::dense(0, m, k).t(), g, View::dense(0, m, n), 1.0, db, View::dense(0, k, n))
                    });
                }
            }
            Op::Linear { x, w, b } => {
                let (n, i) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                let o = self.value(*w).shape()[1];
                if self.requires_grad(*x) {
                    let wd = self.value(*w).data();
                    acc(grads, *x, n * i, |dx| {
                        gemm(1.0, g, View::dense(0, n, o), wd, View::dense(0, i, o).t(), 1.0, dx, View::dense(0, n, i))
                    });
                }
                if self.requires_grad(*w) {
                    let xd = self.value(*x).data();
                    acc(grads, *w, i * o, |dw| {
                        gemm(1.0, xd, View::dense(0, n, i).t(), g, View::dense(0, n, o), 1.0, dw, View::dense(0, i, o))
                    });
                }
                if let Some(b) = b {
                    if self.requires_grad(*b) {
                        acc(grads, *b, o, |db| {
                            for row in g.chunks(o) {
                                db.iter_mut().zip(row).for_each(|(d, x)| *d += x);
                            }
                        });
                    }
                }
            }
            Op::Add(a, b) => {
                for p in [a, b] {
                    if self.requires_grad(*p) {
                        acc(grads, *p, g.len(), |d| d.iter_mut().zip(g).for_each(|(d, x)| *d += x));
                    }
                }
            }
            Op::Mul(a, b) => {
                for (p, other) in [(a, b), (b, a)] {
                    if self.requires_grad(*p) {
                        let od = self.value(*other).data();
                        acc(grads, *p, g.len(), |d| {
                            for ((d, x), y) in d.iter_mut().zip(g).zip(od) {
                                *d += x * y;
                            }
                        });
                    }
                }
            }
            Op::Scale(a, f) => {
                if self.requires_grad(*a) {
                    acc(grads, *a, g.len(), |d| d.iter_mut().zip(g).for_each(|(d, x)| *d += f * x));
                }
            }
            Op::AddRow(a, r) => {
                if self.requires_grad(*a) {
                    acc(grads, *a, g.len(), |d| d.iter_mut().zip(g).for_each(|(d, x)| *d += x));
                }
                if self.requires_grad(*r) {
                    let c = self.value(*r).len();
                    acc(grads, *r, c, |dr| {
                        for row in g.chunks(c) {
                            dr.iter_mut().zip(row).for_each(|(d, x)| *d += x);
                        }
                    });
                }
            }
            Op::Gelu(a) => {
                if self.requires_grad(*a) {
                    let xd = self.value(*a).data();
                    acc(grads, *a, g.len(), |d| {
                        for ((d, gy), &x) in d.iter_mut().zip(g).zip(xd) {
                            let u = GELU_C * (x + GELU_A * x * x * x);
                            let t = u.tanh();
                            let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                            *d += gy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
                        }
                    });
                }
            }
            Op::Relu(a) => {
                if self.requires_grad(*a) {
                    let xd = self.value(*a).data();
                    acc(grads, *a, g.len(), |d| {
                        for ((d, gy), &x) in d.iter_mut().zip(g).zip(xd) {
                            if x > 0.0 {
                                *d += gy;
                            }
                        }
                    });
                }
            }
            Op::Softmax(a) => {
                if self.requires_grad(*a) {
                    let y = node.value.data();
                    let w = *node.value.shape().last().unwrap_or(&1);
                    acc(grads, *a, g.len(), |d| {
                        for ((dr, gr), yr) in d.chunks_mut(w).zip(g.chunks(w)).zip(y.chunks(w)) {
                            let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                            for ((d, gy), yy) in dr.iter_mut().zip(gr).zip(yr) {
                                *d += yy * (gy - dot);
                            }
                        }
                    });
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let c = self.value(*gamma).len();
                let gam = self.value(*gamma).data();
                if self.requires_grad(*gamma) {
                    acc(grads, *gamma, c, |dg| {
                        for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                            for ((d, gy), h) in dg.iter_mut().zip(gr).zip(hr) {
                                *d += gy * h;
                            }
                        }
                    });
                }
                if self.requires_grad(*beta) {
                    acc(grads, *beta, c, |db| {
                        for gr in g.chunks(c) {
                            db.iter_mut().zip(gr).for_each(|(d, x)| *d += x);
                        }
                    });
                }
                if self.requires_grad(*x) {
                    acc(grads, *x, g.len(), |dx| {
                        let mut dh = vec![0.0; c];
                        for (r, ((dxr, gr), hr)) in dx.chunks_mut(c).zip(g.chunks(c)).zip(xhat.chunks(c)).enumerate() {
                            for j in 0..c {
                                dh[j] = gr[j] * gam[j];
                            }
                            let mean_dh = dh.iter().sum::<f64>() / c as f64;
                            let mean_dh_h = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                            for j in 0..c {
                                dxr[j] += rstd[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                            }
                        }
                    });
                }
            }
            Op::Embedding { table, ids } => {
                if self.requires_grad(*table) {
                    let d = self.value(*table).shape()[1];
                    acc(grads, *table, self.value(*table).len(), |dt| {
                        for (row, &id) in g.chunks(d).zip(ids) {
                            dt[id * d..(id + 1) * d].iter_mut().zip(row).for_each(|(a, b)| *a += b);
                        }
                    });
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if self.requires_grad(*p) {
                        let src = &g[offset..offset + len];
                        acc(grads, *p, len, |d| d.iter_mut().zip(src).for_each(|(a, b)| *a += b));
                    }
                    offset += len;
                }
            }
            Op::SliceRows { x, start } => {
                if self.requires_grad(*x) {
                    let w = self.value(*x).row_len();
                    let off = start * w;
                    acc(grads, *x, self.value(*x).len(), |d| {
                        d[off..off + g.len()].iter_mut().zip(g).for_each(|(a, b)| *a += b)
                    });
                }
            }
            Op::Attention { q, k, v, batch, seq, heads, probs } => {
                self.attention_backward(g, grads, [*q, *k, *v], *batch, *seq, *heads, probs);
            }
            Op::CrossEntropy { logits, targets, weights, total, probs } => {
                if self.requires_grad(*logits) {
                    let vocab = self.value(*logits).shape()[1];
                    let gl = g[0];
                    acc(grads, *logits, probs.len(), |d| {
                        for (r, (dr, pr)) in d.chunks_mut(vocab).zip(probs.chunks(vocab)).enumerate() {
                            if weights[r] == 0.0 {
                                continue;
                            }
                            let f = gl * weights[r] / total;
                            for (dd, p) in dr.iter_mut().zip(pr) {
                                *dd += f * p;
                            }
                            dr[targets[r]] -= f;
                        }
                    });
                }
            }
            Op::Sum(a) => {
                if self.requires_grad(*a) {
                    let n = self.value(*a).len();
                    acc(grads, *a, n, |d| d.iter_mut().for_each(|x| *x += g[0]));
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        [q, k, v]: [Var; 3],
        batch: usize,
        seq: usize,
        heads: usize,
        probs: &[f64],
    ) {
        let d = self.value(q).shape()[1];
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let n = batch * seq;
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; n * d];
        let mut dv = vec![0.0; n * d];
        let mut dp = vec![0.0; seq * seq];
        let sq = View::dense(0, seq, seq);
        for b in 0..batch {
            for h in 0..heads {
                let base = (b * heads + h) * seq * seq;
                let p = &probs[base..base + seq * seq];
                let hv = View { offset: b * seq * d + h * dh, rows: seq, cols: dh, row_stride: d, col_stride: 1 };
                // dV = P^T dO
                gemm(1.0, p, sq.t(), g, hv, 0.0, &mut dv, hv);
                // dP = dO V^T
                gemm(1.0, g, hv, vd, hv.t(), 0.0, &mut dp, sq);
                // dS = P * (dP - rowsum(dP * P)), folded with the 1/sqrt(dh) scale
                for (dr, pr) in dp.chunks_mut(seq).zip(p.chunks(seq)) {
                    let dot: f64 = dr.iter().zip(pr).map(|(a, b)| a * b).sum();
                    for (x, pp) in dr.iter_mut().zip(pr) {
                        *x = pp * (*x - dot) * scale;
                    }
                }
                gemm(1.0, &dp, sq, kd, hv, 0.0, &mut dq, hv);
                gemm(1.0, &dp, sq.t(), qd, hv, 0.0, &mut dk, hv);
            }
        }
        for (var, delta) in [(q, dq), (k, dk), (v, dv)] {
            if self.requires_grad(var) {
                acc(grads, var, n * d, |dst| dst.iter_mut().zip(&delta).for_each(|(a, b)| *a += b));
            }
        }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize, f: impl FnOnce(&mut [f64])) {
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    row.iter_mut().for_each(|x| *x /= sum);
}
