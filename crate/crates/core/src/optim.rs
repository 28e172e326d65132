//! Adam optimizer with bias correction.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-parameter Adam state. `step` counts completed updates.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub m: Tensor,
    pub v: Tensor,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub lr: f32,
}

impl AdamState {
    /// State for a parameter of the given shape with standard defaults
    /// β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
    pub fn new(shape: &[usize], lr: f32) -> Self {
        AdamState {
            step: 0,
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr,
        }
    }

    /// One Adam update. On a non-finite gradient the parameter and state are
    /// left untouched and an error is returned.
    pub fn step(&mut self, param: &mut Tensor, grad: &Tensor) -> Result<()> {
        if param.shape() != grad.shape() || param.shape() != self.m.shape() {
            return Err(Error::invalid(format!(
                "adam shapes disagree: param {:?}, grad {:?}, state {:?}",
                param.shape(),
                grad.shape(),
                self.m.shape()
            )));
        }
        if !grad.all_finite() {
            return Err(Error::invalid("adam: non-finite gradient, update skipped"));
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - (self.beta1 as f64).powi(t as i32) as f32;
        let bc2 = 1.0 - (self.beta2 as f64).powi(t as i32) as f32;
        let (b1, b2) = (self.beta1, self.beta2);
        let m = self.m.data_mut();
        let v = self.v.data_mut();
        let p = param.data_mut();
        let g = grad.data();
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}
