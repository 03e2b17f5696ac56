//! Adam with bias correction.
//!
//! ```text
//! m ← β₁·m + (1−β₁)·g
//! v ← β₂·v + (1−β₂)·g²
//! p ← p − lr · m̂ / (sqrt(v̂) + ε),   m̂ = m/(1−β₁ᵗ),  v̂ = v/(1−β₂ᵗ)
//! ```

use crate::model::{ModelError, ParamSet};
use crate::tensor::Tensor;

/// The ε added to `sqrt(v̂)` in every update.
pub const ADAM_EPSILON: f64 = 1e-8;

/// First and second moment estimates for one parameter collection.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: ParamSet,
    pub v: ParamSet,
}

impl Adam {
    /// Zero moments shaped like `params`.
    pub fn new(params: &ParamSet, beta1: f64, beta2: f64) -> Self {
        let zeros = || {
            let mut s = ParamSet::new();
            for (name, t) in params.iter() {
                s.insert(name, Tensor::zeros(t.shape()));
            }
            s
        };
        Self { beta1, beta2, t: 0, m: zeros(), v: zeros() }
    }

    /// Apply one update. `grads` are in `params` order.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor], lr: f64) -> Result<(), ModelError> {
        if grads.len() != params.len() {
            return Err(ModelError::Dimension(format!("{} gradients for {} parameter arrays", grads.len(), params.len())));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if g.shape() != p.shape() {
                return Err(ModelError::Dimension(format!(
                    "gradient for {name} has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (self.beta1, self.beta2);
        let moments = self.m.iter_mut().zip(self.v.iter_mut());
        for (((_, p), g), ((_, m), (_, v))) in params.iter_mut().zip(grads).zip(moments) {
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPSILON);
            }
        }
        Ok(())
    }
}
