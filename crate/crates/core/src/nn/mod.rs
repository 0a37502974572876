//! Minimal dense neural kernels with exact manual gradients, the AdamW
//! optimizer, a central-difference gradient checker and the checkpoint
//! format. All arithmetic is `f64`.

pub mod checkpoint;
pub mod gradcheck;
pub mod kernels;
pub mod optim;
pub mod tensor;

pub use kernels::{Affine, GruCell, Mlp2};
pub use tensor::Matrix;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("shape mismatch in {context}: expected {expected}, got {actual}")]
pub struct ShapeError {
    pub context: String,
    pub expected: String,
    pub actual: String,
}

impl ShapeError {
    pub fn new(context: impl Into<String>, expected: impl Into<String>, actual: impl Into<String>) -> Self {
        Self {
            context: context.into(),
            expected: expected.into(),
            actual: actual.into(),
        }
    }
}

/// A collection of named parameter tensors.
///
/// Gradients and optimizer moments reuse the implementing type, so every
/// learnable structure doubles as its own gradient container. The order of
/// tensors returned by `collect` and `collect_mut` must match.
pub trait ParamSet: Clone {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64])>);
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [f64])>);

    fn named(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        self.collect("", &mut out);
        out.into_iter()
            .map(|(n, t)| (n.trim_start_matches('.').to_string(), t))
            .collect()
    }

    fn named_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        self.collect_mut("", &mut out);
        out.into_iter()
            .map(|(n, t)| (n.trim_start_matches('.').to_string(), t))
            .collect()
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    fn fill(&mut self, value: f64) {
        for (_, t) in self.named_mut() {
            t.iter_mut().for_each(|v| *v = value);
        }
    }

    fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    fn scale(&mut self, s: f64) {
        for (_, t) in self.named_mut() {
            t.iter_mut().for_each(|v| *v *= s);
        }
    }

    /// `self += scale * other`
    fn add_scaled(&mut self, other: &Self, scale: f64) {
        let src = other.named();
        for ((_, dst), (_, s)) in self.named_mut().into_iter().zip(src) {
            tensor::axpy(dst, scale, s);
        }
    }

    fn global_norm(&self) -> f64 {
        self.named()
            .iter()
            .flat_map(|(_, t)| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

impl ParamSet for Vec<f64> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64])>) {
        out.push((prefix.to_string(), self));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [f64])>) {
        out.push((prefix.to_string(), self));
    }
}
