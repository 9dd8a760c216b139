use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// AdamW hyperparameters. Betas default to (0.9, 0.98).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment buffers and step counter, one slot per parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamWState {
    pub config: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamWState {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One decoupled-weight-decay update over `params` with matching `grads`
    /// (`None` = no gradient this step, the slot is skipped).
    pub fn step_tensors(&mut self, params: &mut [&mut Tensor<f32>], grads: &[Option<&[f32]>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::invalid(
                "adamw",
                format!("{} parameters but {} gradients", params.len(), grads.len()),
            ));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::invalid("adamw", "parameter count changed between steps"));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if m.len() != p.numel() || g.is_some_and(|g| g.len() != p.numel()) {
                return Err(Error::shape("adamw", p.shape(), &[g.map_or(m.len(), <[f32]>::len)]));
            }
        }

        self.t += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let decay = 1.0 - c.lr * c.weight_decay;
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                let gi = g[i] as f64;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let updated = (*x as f64) * decay - c.lr * mhat / (vhat.sqrt() + c.eps);
                *x = updated as f32;
            }
        }
        Ok(())
    }

    /// Updates every tensor in `store` from its `grad` field.
    pub fn step(&mut self, store: &mut ParamStore<f32>) -> Result<()> {
        let grads: Vec<Option<Vec<f32>>> = store.iter().map(|(_, t)| t.grad.clone()).collect();
        let grad_refs: Vec<Option<&[f32]>> = grads.iter().map(|g| g.as_deref()).collect();
        let mut params: Vec<&mut Tensor<f32>> = store.tensors_mut().collect();
        self.step_tensors(&mut params, &grad_refs)
    }
}
