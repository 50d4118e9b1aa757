//! AdamW with decoupled weight decay and the warmup + cosine schedule.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;

/// Linear warmup from 0 to `base_lr`, then cosine decay to 0 at `total_steps`.
pub fn lr_at(step: u64, total_steps: u64, warmup_steps: u64, base_lr: f64) -> Result<f64> {
    if warmup_steps >= total_steps && total_steps > 0 {
        return Err(Error::Config(format!(
            "warmup of {warmup_steps} steps must be shorter than {total_steps} total"
        )));
    }
    if step > total_steps {
        return Err(Error::Config(format!("step {step} beyond schedule end {total_steps}")));
    }
    if step < warmup_steps {
        return Ok(base_lr * step as f64 / warmup_steps as f64);
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.05 }
    }
}

/// First and second moment buffers for one parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub first: Vec<Array2<f64>>,
    pub second: Vec<Array2<f64>>,
    pub steps: u64,
}

impl AdamWState {
    pub fn zeros_like(set: &ParamSet) -> Self {
        Self {
            first: set.tensors().iter().map(|t| Array2::zeros(t.raw_dim())).collect(),
            second: set.tensors().iter().map(|t| Array2::zeros(t.raw_dim())).collect(),
            steps: 0,
        }
    }

    /// One AdamW update. Missing gradients count as zero. Decay is applied
    /// as `p ← p·(1 − lr·wd)` before the adaptive step.
    pub fn step(&mut self, set: &mut ParamSet, grads: &[Option<Array2<f64>>], lr: f64, cfg: &AdamWConfig) -> Result<()> {
        if grads.len() != set.len() || self.first.len() != set.len() {
            return Err(Error::State("optimizer buffers do not match parameter set".into()));
        }
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for id in 0..set.len() {
            let decay = if set.decays(id) { 1.0 - lr * cfg.weight_decay } else { 1.0 };
            let p = set.get_mut(id);
            let (m, v) = (&mut self.first[id], &mut self.second[id]);
            match &grads[id] {
                Some(g) => {
                    if g.dim() != p.dim() {
                        return Err(Error::State(format!("gradient shape mismatch for tensor {id}")));
                    }
                    Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                        *p *= decay;
                        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                        *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + cfg.eps);
                    });
                }
                None => {
                    Zip::from(p).and(m).and(v).for_each(|p, m, v| {
                        *p *= decay;
                        *m *= cfg.beta1;
                        *v *= cfg.beta2;
                        *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + cfg.eps);
                    });
                }
            }
        }
        Ok(())
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(groups: &mut [&mut Vec<Option<Array2<f64>>>], max_norm: f64) -> f64 {
    let norm = groups
        .iter()
        .flat_map(|g| g.iter().flatten())
        .map(|t| t.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in groups.iter_mut() {
            for t in g.iter_mut().flatten() {
                t.mapv_inplace(|v| v * scale);
            }
        }
    }
    norm
}
