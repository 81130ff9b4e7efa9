use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        if config.lr.is_nan() || config.lr <= 0.0 {
            return Err(TensorError::Invalid { op: "adamw", msg: format!("lr must be > 0, got {}", config.lr) });
        }
        Ok(Self { config, step: 0, m: BTreeMap::new(), v: BTreeMap::new() })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update with learning rate `lr` (the scheduler's current value).
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        if lr.is_nan() || lr <= 0.0 {
            return Err(TensorError::Invalid { op: "adamw", msg: format!("lr must be > 0, got {lr}") });
        }
        let c = self.config;
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let p = params.get_mut(name).ok_or_else(|| TensorError::UnknownParam(name.clone()))?;
            if p.shape() != g.shape() {
                return Err(TensorError::Shape { op: "adamw", lhs: p.shape().to_vec(), rhs: g.shape().to_vec() });
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *w -= lr * c.weight_decay * *w;
                *w -= lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

/// Clamps every gradient component to `[-clip, clip]`.
pub fn clip_grad_value(grads: &mut BTreeMap<String, Tensor>, clip: f64) {
    for g in grads.values_mut() {
        for v in g.data_mut() {
            *v = v.clamp(-clip, clip);
        }
    }
}
