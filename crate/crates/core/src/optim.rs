//! Adaptive-moment optimizer with decoupled weight decay, and gradient clipping.

use serde::{Deserialize, Serialize};

use crate::policy::{ParamId, Params, PolicyConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Params,
    v: Params,
    t: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, shapes: &PolicyConfig) -> Self {
        Self {
            config,
            m: Params::zeros(shapes),
            v: Params::zeros(shapes),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update. Groups in `frozen` are left untouched; `lr_scale` multiplies
    /// the learning rate per group.
    pub fn step(&mut self, params: &mut Params, grads: &Params, frozen: &[ParamId], lr_scale: impl Fn(ParamId) -> f64) {
        self.t += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for id in ParamId::ALL {
            if frozen.contains(&id) {
                continue;
            }
            let lr = lr * lr_scale(id);
            let (p, g, m, v) = (&mut params[id], &grads[id], &mut self.m[id], &mut self.v[id]);
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * weight_decay * p[i];
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Rescales `grads` in place so its global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut Params, max_norm: f64) -> f64 {
    let norm = grads.l2_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}
