use serde::{Deserialize, Serialize};

use super::{ParamGrads, ParamStore, Result, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Adam with decoupled weight decay and bias-corrected moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Self { config, step: 0, m: zeros.clone(), v: zeros }
    }

    /// Restores a saved optimizer state.
    pub fn from_state(config: AdamWConfig, step: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>, params: &ParamStore) -> Result<Self> {
        if m.len() != params.len() || v.len() != params.len() {
            return Err(TensorError::Invalid("optimizer state does not cover every parameter".into()));
        }
        for (i, (_, name, t)) in params.iter().enumerate() {
            if m[i].len() != t.len() || v[i].len() != t.len() {
                return Err(TensorError::Invalid(format!("optimizer moment shape mismatch for `{name}`")));
            }
        }
        Ok(Self { config, step, m, v })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.v
    }

    /// Applies one update to every parameter. Every parameter must have a gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamGrads) -> Result<()> {
        let ids: Vec<_> = params.ids().collect();
        for &id in &ids {
            if grads.get(id).is_none() {
                return Err(TensorError::MissingGradient(params.name(id).to_string()));
            }
        }
        self.step += 1;
        let AdamWConfig { lr, beta1, beta2, eps, weight_decay } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for id in ids {
            let g = grads.get(id).expect("checked above");
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                p[i] -= lr * weight_decay * p[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
