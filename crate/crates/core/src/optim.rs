//! Adam optimizer and the step-decay learning-rate schedule.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// When false (default), weight decay couples into the gradient before
    /// the moment updates (classic L2). When true, decay applies directly to
    /// the parameters (AdamW style).
    pub decoupled_weight_decay: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-3,
            decoupled_weight_decay: false,
        }
    }
}

/// Per-parameter first/second moment buffers plus the shared step counter.
pub struct Adam<S: Scalar> {
    config: AdamConfig,
    params: Vec<(String, Tensor<S>)>,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
    step: u64,
}

impl<S: Scalar> Adam<S> {
    pub fn new(config: AdamConfig, params: Vec<(String, Tensor<S>)>) -> Self {
        let first = params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect();
        let second = params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect();
        Adam {
            config,
            params,
            first_moment: first,
            second_moment: second,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update with bias correction. `lr` overrides the configured
    /// base rate so the schedule can feed in the per-epoch value. Gradients
    /// are consumed: every parameter's grad is reset to zero afterwards.
    pub fn step(&mut self, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c = self.config;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for (i, (name, p)) in self.params.iter().enumerate() {
            let grad = p.grad().unwrap_or_else(|| vec![S::zero(); p.numel()]);
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for parameter '{name}'"
                )));
            }
            let mut values: Vec<f64> = p.data().iter().map(|v| v.as_f64()).collect();
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            for j in 0..values.len() {
                let mut g = grad[j].as_f64();
                if !c.decoupled_weight_decay {
                    g += c.weight_decay * values[j];
                }
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                if c.decoupled_weight_decay {
                    values[j] -= lr * c.weight_decay * values[j];
                }
                values[j] -= lr * m_hat / (v_hat.sqrt() + c.eps);
            }
            let new: Vec<S> = values.iter().map(|&x| S::from_f64(x)).collect();
            p.set_data(&new);
            p.zero_grad();
        }
        Ok(())
    }
}

/// Step decay: halve the base rate every `period` epochs.
pub fn lr_schedule(epoch: u64, base_lr: f64, period: u64, factor: f64) -> f64 {
    base_lr * factor.powi((epoch / period) as i32)
}
