//! AdamW with decoupled weight decay, global-norm clipping and a linear
//! warm-up / linear decay learning-rate schedule.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Applied to matrices only; gains and biases are not decayed.
    pub weight_decay: f32,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f32>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            clip_norm: Some(1.0),
        }
    }
}

/// Linear warm-up to `base_lr` over `warmup_steps`, then linear decay to 0
/// at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f32,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl LrSchedule {
    pub fn new(base_lr: f32, total_steps: usize, warmup_fraction: f32) -> Result<Self> {
        if !(base_lr > 0.0) || !base_lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {base_lr}")));
        }
        if !(0.0..1.0).contains(&warmup_fraction) {
            return Err(Error::Config(format!("warm-up fraction must lie in [0, 1), got {warmup_fraction}")));
        }
        Ok(Self {
            base_lr,
            total_steps,
            warmup_steps: (warmup_fraction * total_steps as f32).round() as usize,
        })
    }

    /// Fixed warm-up length regardless of run length.
    pub fn with_warmup_steps(base_lr: f32, total_steps: usize, warmup_steps: usize) -> Self {
        Self {
            base_lr,
            total_steps,
            warmup_steps: warmup_steps.min(total_steps),
        }
    }

    /// Rate used for optimizer step `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f32 {
        if step < self.warmup_steps {
            return self.base_lr * (step + 1) as f32 / self.warmup_steps as f32;
        }
        let decay = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let left = self.total_steps.saturating_sub(step);
        self.base_lr * left as f32 / decay as f32
    }
}

#[derive(Clone, Debug, Default)]
pub struct AdamW {
    pub config: AdamWConfig,
    moments: HashMap<String, (Vec<f32>, Vec<f32>)>,
    steps: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            moments: HashMap::new(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update to every parameter that has a gradient and
    /// returns the pre-clipping global gradient norm.
    pub fn step(&mut self, model: &mut Model, grads: &HashMap<String, Vec<f32>>, lr: f32) -> f32 {
        let mut params = model.named_params_mut();
        // Norm accumulated in the fixed parameter order for bitwise
        // reproducibility.
        let sq: f64 = params
            .iter()
            .filter_map(|(n, _)| grads.get(n))
            .flat_map(|g| g.iter().map(|v| (*v as f64) * (*v as f64)))
            .sum();
        let norm = sq.sqrt() as f32;
        let scale = match self.config.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.steps += 1;
        let c = &self.config;
        let t = self.steps as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, param) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let decay = if param.ndim() >= 2 { c.weight_decay } else { 0.0 };
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            let data = param.data_mut();
            for i in 0..data.len() {
                let gi = g[i] * scale;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
                data[i] -= lr * (update + decay * data[i]);
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_warms_up_then_decays_to_zero() {
        let s = LrSchedule::new(1.0, 100, 0.05).unwrap();
        assert_eq!(s.warmup_steps, 5);
        assert!((s.lr_at(0) - 0.2).abs() < 1e-6);
        assert!((s.lr_at(4) - 1.0).abs() < 1e-6);
        assert!((s.lr_at(5) - 1.0).abs() < 1e-6);
        assert!(s.lr_at(50) < s.lr_at(10));
        assert!(s.lr_at(99) > 0.0 && s.lr_at(99) < 0.02);
        assert!(LrSchedule::new(0.0, 10, 0.1).is_err());
        assert!(LrSchedule::new(1.0, 10, 1.0).is_err());
        let none = LrSchedule::new(1.0, 10, 0.0).unwrap();
        assert_eq!(none.lr_at(0), 1.0);
    }
}
