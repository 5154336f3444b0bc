//! Adam with global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::autodiff::Gradients;
use crate::error::{shape, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Gradients whose global norm exceeds this are rescaled to it; `0`
    /// disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
        }
    }
}

/// First and second moment estimates plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<F> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(config: AdamConfig, params: &[Tensor<F>]) -> Self {
        Adam {
            config,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    /// Clips `grads` in place, then applies one update. Returns the gradient
    /// norm before clipping.
    pub fn update(&mut self, params: &mut [Tensor<F>], grads: &mut Gradients<F>) -> Result<f64> {
        if params.len() != grads.tensors.len() || params.len() != self.m.len() {
            return Err(shape("optimizer, parameter and gradient lists differ"));
        }
        let norm = grads.global_norm().to_f64();
        let c = self.config;
        if c.clip_norm > 0.0 && norm > c.clip_norm {
            grads.scale(F::lit(c.clip_norm / norm));
        }
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (F::lit(c.beta1), F::lit(c.beta2));
        let (ob1, ob2) = (F::lit(1.0 - c.beta1), F::lit(1.0 - c.beta2));
        let lr = F::lit(c.learning_rate / bc1);
        let inv_bc2 = F::lit(1.0 / bc2);
        let eps = F::lit(c.eps);
        for (((p, g), m), v) in params.iter_mut().zip(&grads.tensors).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = b1 * *m + ob1 * g;
                *v = b2 * *v + ob2 * g * g;
                *p -= lr * *m / ((*v * inv_bc2).sqrt() + eps);
            }
        }
        Ok(norm)
    }
}
