// SPDX-License-Identifier: MIT OR Apache-2.0

//! AdamW with decoupled weight decay and bias-corrected moments.

use serde::{Deserialize, Serialize};

use crate::sae::{SaeGradients, SaeParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWMoments {
    pub m1: SaeGradients,
    pub m2: SaeGradients,
}

impl AdamWMoments {
    pub fn zeros(n: usize, d: usize) -> Self {
        Self { m1: SaeGradients::zeros(n, d), m2: SaeGradients::zeros(n, d) }
    }

    pub fn is_finite(&self) -> bool {
        self.m1.is_finite() && self.m2.is_finite()
    }

    /// One update at (1-based) step `t`.
    pub fn step(&mut self, params: &mut SaeParams, grads: &SaeGradients, lr: f64, cfg: &AdamWConfig, t: u64) {
        let bc1 = 1.0 - cfg.beta1.powi(t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(t as i32);
        let decay = 1.0 - lr * cfg.weight_decay;
        let tensors = params.tensors_mut().into_iter().zip(grads.tensors());
        let moments = self.m1.tensors_mut().into_iter().zip(self.m2.tensors_mut());
        for ((p, g), (m1, m2)) in tensors.zip(moments) {
            for i in 0..p.len() {
                m1[i] = cfg.beta1 * m1[i] + (1.0 - cfg.beta1) * g[i];
                m2[i] = cfg.beta2 * m2[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let m_hat = m1[i] / bc1;
                let v_hat = m2[i] / bc2;
                p[i] = p[i] * decay - lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
    }
}
