//! AdamW with global-norm gradient clipping.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::ParamSet;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimError {
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),
    #[error("gradient layout does not match parameters")]
    LayoutMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    /// Global L2 norm the joint gradient is clipped to; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-3,
            clip_norm: Some(1.0),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW<P> {
    pub config: AdamWConfig,
    pub m: P,
    pub v: P,
    pub step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns `(norm_before, norm_after)`.
pub fn clip_global_norm<P: ParamSet>(grads: &mut P, max_norm: f64) -> (f64, f64) {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for (_, t) in grads.named_mut() {
            t.iter_mut().for_each(|g| *g *= scale);
        }
        (norm, grads.global_norm())
    } else {
        (norm, norm)
    }
}

impl<P: ParamSet> AdamW<P> {
    pub fn new(config: AdamWConfig, params: &P) -> Self {
        Self {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut P, grads: &P) -> Result<StepReport, OptimError> {
        for (name, g) in grads.named() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(OptimError::NonFiniteGradient(name));
            }
        }
        if grads.num_params() != params.num_params() {
            return Err(OptimError::LayoutMismatch);
        }
        let mut grads = grads.clone();
        let (grad_norm, clipped_norm) = match self.config.clip_norm {
            Some(c) => clip_global_norm(&mut grads, c),
            None => {
                let n = grads.global_norm();
                (n, n)
            }
        };

        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);

        let g_named = grads.named();
        let m_named = self.m.named_mut();
        let v_named = self.v.named_mut();
        for ((((_, p), (_, g)), (_, m)), (_, v)) in params
            .named_mut()
            .into_iter()
            .zip(g_named)
            .zip(m_named)
            .zip(v_named)
        {
            for i in 0..p.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= c.lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * p[i]);
            }
        }
        Ok(StepReport {
            grad_norm,
            clipped_norm,
        })
    }
}
