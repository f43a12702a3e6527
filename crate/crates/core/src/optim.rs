//! Adam with bias correction, one state per parameter tensor.

use crate::error::{HgError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct AdamState {
    m: Tensor,
    v: Tensor,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
}

impl AdamState {
    /// Defaults: beta1 0.9, beta2 0.999, eps 1e-8. The toy default learning
    /// rate is 1e-3; smaller full-scale-style rates are a config choice.
    pub fn new(shape: Vec<usize>, lr: f64) -> Self {
        AdamState {
            m: Tensor::zeros(shape.clone()),
            v: Tensor::zeros(shape),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update in place. `name` only labels error messages.
pub fn adam_step(param: &mut Tensor, grad: &Tensor, state: &mut AdamState, name: &str) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != state.m.shape() {
        return Err(HgError::ShapeMismatch {
            op: "adam_step",
            lhs: param.shape().to_vec(),
            rhs: grad.shape().to_vec(),
        });
    }
    if !grad.is_finite() {
        return Err(HgError::numeric(format!(
            "non-finite gradient for parameter {name}"
        )));
    }
    if state.lr <= 0.0 {
        return Err(HgError::validation(format!(
            "adam_step: lr must be positive, got {}",
            state.lr
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps, lr) = (state.beta1, state.beta2, state.eps, state.lr);
    for ((p, g), (m, v)) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(state.m.data_mut().iter_mut().zip(state.v.data_mut()))
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}
