//! Adam and the warmup + cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.min_lr > 0.0 && self.min_lr <= self.base_lr) {
            return Err(Error::contract(format!(
                "learning rates must satisfy 0 < min ({}) <= base ({})",
                self.min_lr, self.base_lr
            )));
        }
        if self.total_steps == 0 || self.warmup_steps >= self.total_steps {
            return Err(Error::contract(format!(
                "warmup ({} steps) must be shorter than training ({} steps)",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }

    /// Linear ramp from 0 to `base_lr` over the warmup, then cosine decay to
    /// `min_lr` at `total_steps`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let step = step.min(self.total_steps);
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        let span = (self.total_steps - self.warmup_steps).max(1) as f64;
        let progress = (step - self.warmup_steps) as f64 / span;
        self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Moment buffers in manifest order plus the update count.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn for_params(p: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = p.entries().iter().map(|e| vec![0.0; e.values.len()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn matches(&self, p: &ParamStore) -> bool {
        self.m.len() == p.len()
            && self.v.len() == p.len()
            && p.entries()
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|(e, (m, v))| m.len() == e.values.len() && v.len() == e.values.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    /// One bias-corrected update. Every gradient is checked before any
    /// parameter changes, so a failed step leaves `params` untouched.
    pub fn step(&self, params: &mut ParamStore, state: &mut AdamState, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || !state.matches(params) {
            return Err(Error::contract("gradient or optimizer layout does not match the parameters"));
        }
        for (e, g) in params.entries().iter().zip(grads) {
            if g.len() != e.values.len() {
                return Err(Error::dim("adam", &[g.len()], &e.shape));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient { param: e.name.clone() });
            }
        }
        state.step += 1;
        let t = state.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, e) in params.entries_mut().iter_mut().enumerate() {
            let (m, v) = (&mut state.m[i], &mut state.v[i]);
            for (k, p) in e.values.iter_mut().enumerate() {
                let g = grads[i][k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                *p -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
