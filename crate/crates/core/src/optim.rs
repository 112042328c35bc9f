//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    #[serde(default = "default_min_lr")]
    pub min_lr: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub epochs: usize,
}

fn default_min_lr() -> f64 {
    1e-5
}

fn default_weight_decay() -> f64 {
    0.05
}

fn default_batch_size() -> usize {
    16
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::validation("lr must be positive"));
        }
        if !(0.0..=self.lr).contains(&self.min_lr) {
            return Err(Error::validation("min_lr must lie in [0, lr]"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::validation("weight_decay must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be positive"));
        }
        Ok(())
    }
}

/// Cosine decay from `base` at step 0 to `min` at `total`.
pub fn cosine_lr(step: usize, total: usize, base: f64, min: f64) -> f64 {
    if total == 0 {
        return base;
    }
    let progress = (step.min(total) as f64) / total as f64;
    min + 0.5 * (base - min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// AdamW state for a fixed, ordered list of parameters.
#[derive(Debug, Clone)]
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update of every parameter that carries a gradient. The parameter
    /// order must match across calls.
    pub fn step(&mut self, params: &mut [&mut Tensor], lr: f64) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        assert_eq!(self.m.len(), params.len(), "parameter list changed");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(grad) = p.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let decay = 1.0 - lr * self.weight_decay;
            for (((w, g), mi), vi) in p.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
                *w = *w * decay - lr * update;
            }
        }
    }

    /// Clears both moment estimates of parameter `index`.
    pub fn reset_moments(&mut self, index: usize) {
        if let (Some(m), Some(v)) = (self.m.get_mut(index), self.v.get_mut(index)) {
            m.fill(0.0);
            v.fill(0.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 100, 1e-2, 1e-5), 1e-2);
        assert!((cosine_lr(100, 100, 1e-2, 1e-5) - 1e-5).abs() < 1e-18);
        let mid = cosine_lr(50, 100, 1.0, 0.0);
        assert!((mid - 0.5).abs() < 1e-12);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Tensor::new(vec![2], vec![1.0, -1.0]).unwrap().with_grad();
        p.set_grad(vec![0.3, -2.0]).unwrap();
        let mut opt = AdamW::new(0.0);
        opt.step(&mut [&mut p], 0.1);
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn zero_param_with_zero_grad_and_reset_stays_zero() {
        let mut p = Tensor::zeros(&[3]).with_grad();
        p.set_grad(vec![1.0, 1.0, 1.0]).unwrap();
        let mut opt = AdamW::new(0.05);
        opt.step(&mut [&mut p], 0.1);
        p.data_mut().fill(0.0);
        opt.reset_moments(0);
        p.set_grad(vec![0.0; 3]).unwrap();
        opt.step(&mut [&mut p], 0.1);
        assert!(p.is_all_zero());
    }
}
