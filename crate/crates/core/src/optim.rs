//! Adam with a linear warmup/decay schedule and global-norm clipping.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub warmup_steps: u64,
    /// Steps over which the rate decays linearly to zero after warmup;
    /// 0 keeps it constant.
    pub total_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    /// Number of micro-batches a batch is split into per update.
    pub accumulation: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-3,
            warmup_steps: 100,
            total_steps: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: 1.0,
            accumulation: 2,
        }
    }
}

impl OptimizerConfig {
    /// Learning rate for 0-based update index `step`.
    pub fn rate_at(&self, step: u64) -> f64 {
        let lr = self.learning_rate;
        if step < self.warmup_steps {
            return lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        if self.total_steps == 0 || self.total_steps <= self.warmup_steps {
            return lr;
        }
        let remaining = self.total_steps.saturating_sub(step) as f64;
        let span = (self.total_steps - self.warmup_steps) as f64;
        lr * (remaining / span).max(0.0)
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    config: OptimizerConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Adam {
    pub fn new(n_params: usize, config: OptimizerConfig) -> Self {
        Self {
            config,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Clips `grad` in place, then applies one update. Returns the
    /// pre-clip gradient norm.
    pub fn step(&mut self, params: &mut [f64], grad: &mut [f64]) -> f64 {
        assert_eq!(params.len(), grad.len());
        assert_eq!(params.len(), self.m.len());
        let norm = clip_grad_norm(grad, self.config.clip_norm);
        let lr = self.config.rate_at(self.step);
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.config.epsilon);
        }
        norm
    }
}

/// Rescales `grad` so its L2 norm is at most `max_norm` (if positive).
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= scale);
    }
    norm
}
