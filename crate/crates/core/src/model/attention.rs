use super::{ModelConfig, ModelError, Result};
use crate::tensor::Tensor;

/// Attention probabilities from one forward pass over a single piece.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionCapture {
    n_layers: usize,
    n_heads: usize,
    seq_len: usize,
    /// `[layer, head, query, key]`, row-major.
    maps: Vec<f64>,
}

impl AttentionCapture {
    pub fn new(n_layers: usize, n_heads: usize, seq_len: usize, maps: Vec<f64>) -> Self {
        assert_eq!(maps.len(), n_layers * n_heads * seq_len * seq_len, "attention capture size");
        Self { n_layers, n_heads, seq_len, maps }
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn maps(&self) -> &[f64] {
        &self.maps
    }

    pub fn map(&self, layer: usize, head: usize) -> &[f64] {
        let n = self.seq_len * self.seq_len;
        let i = layer * self.n_heads + head;
        &self.maps[i * n..(i + 1) * n]
    }
}

/// Arithmetic mean over all layers and heads, `[seq, seq]`.
pub fn mean_attention(capture: &AttentionCapture) -> Result<Tensor> {
    let count = capture.n_layers * capture.n_heads;
    if count == 0 {
        return Err(ModelError::Input("empty attention capture".into()));
    }
    let n = capture.seq_len * capture.seq_len;
    let mut mean = vec![0.0; n];
    for map in capture.maps.chunks(n) {
        mean.iter_mut().zip(map).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    Ok(Tensor::new(vec![capture.seq_len, capture.seq_len], mean)?)
}

/// Harmony-query / melody-key block of an attention map, `[L, L]`.
pub fn cross_quadrant(mean_map: &Tensor, config: &ModelConfig) -> Result<Tensor> {
    let seq = config.seq_len();
    if mean_map.shape() != [seq, seq] {
        return Err(ModelError::Input(format!(
            "attention map {:?} does not match encoder length {seq}",
            mean_map.shape()
        )));
    }
    let (l, pre) = (config.max_len, config.prefix_len());
    let mut out = Vec::with_capacity(l * l);
    for r in 0..l {
        let row = mean_map.row(pre + l + r);
        out.extend_from_slice(&row[pre..pre + l]);
    }
    Ok(Tensor::new(vec![l, l], out)?)
}
