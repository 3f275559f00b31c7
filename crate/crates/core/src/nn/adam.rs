use crate::autodiff::Array;
use crate::error::{Error, Result};

/// Hyperparameters of the Adam optimizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    /// β1 = 0.5, β2 = 0.999, ε = 1e-8.
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam with one pair of moment accumulators per parameter.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    names: Vec<String>,
    first: Vec<Array>,
    second: Vec<Array>,
    step: u64,
}

impl Adam {
    /// `names` identifies each parameter (in update order) in error reports.
    pub fn new(config: AdamConfig, params: &[&Array], names: Vec<String>) -> Self {
        assert_eq!(params.len(), names.len());
        Adam {
            config,
            names,
            first: params.iter().map(|p| Array::zeros(p.shape())).collect(),
            second: params.iter().map(|p| Array::zeros(p.shape())).collect(),
            step: 0,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update in place. Nothing is modified when any gradient is
    /// non-finite or mis-shaped.
    pub fn step(&mut self, params: &mut [&mut Array], grads: &[Array]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::invalid(format!(
                "adam: expected {} parameters, got {} parameters and {} gradients",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.first[i].shape() || g.shape() != p.shape() {
                return Err(Error::Shape {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(self.names[i].clone()));
            }
        }

        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (k, (w, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Clamps every gradient element into `[lo, hi]`.
pub fn clip_gradients(grads: &mut [Array], lo: f64, hi: f64) {
    for g in grads {
        for x in g.data_mut() {
            *x = x.clamp(lo, hi);
        }
    }
}

/// Gradient clipping range applied before every update.
pub const CLIP_RANGE: (f64, f64) = (-5.0, 5.0);
