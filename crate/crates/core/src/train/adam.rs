//! Adam with decoupled weight decay (decay 0), β = (0.9, 0.999).

use crate::flowmodel::{BranchWeights, ModelConfig};
use crate::linalg::Real;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

pub struct AdamState<T> {
    pub m: BranchWeights<T>,
    pub v: BranchWeights<T>,
    pub step: usize,
}

impl<T: Real> AdamState<T> {
    pub fn new(cfg: &ModelConfig) -> Self {
        AdamState {
            m: BranchWeights::zeros(cfg),
            v: BranchWeights::zeros(cfg),
            step: 0,
        }
    }

    pub fn update(&mut self, weights: &mut BranchWeights<T>, grads: &BranchWeights<T>, lr: f64) {
        self.step += 1;
        let b1 = T::of(BETA1);
        let b2 = T::of(BETA2);
        let one = T::ONE;
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        // Fold bias correction into the step size.
        let alpha = T::of(lr * bc2.sqrt() / bc1);
        let eps = T::of(ADAM_EPS * bc2.sqrt());
        let g_tensors = grads.named_tensors();
        let m_tensors = self.m.named_tensors_mut();
        let v_tensors = self.v.named_tensors_mut();
        let w_tensors = weights.named_tensors_mut();
        for (((( _, w), (_, m)), (_, v)), (_, _, g)) in w_tensors
            .into_iter()
            .zip(m_tensors)
            .zip(v_tensors)
            .zip(g_tensors)
        {
            for i in 0..w.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                w[i] -= alpha * m[i] / (v[i].sqrt() + eps);
            }
        }
    }
}
