//! Adam with decoupled weight decay, plus global gradient-norm clipping.

use alloc::vec::Vec;

use crate::diff::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Per-parameter first/second moment estimates, aligned with the store's
/// registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store
            .iter()
            .map(|p| Tensor::zeros(p.tensor.shape()))
            .collect();
        Self {
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One update: `theta <- theta - lr * wd * theta`, then the bias-corrected
/// Adam delta. Gradients are zeroed afterwards.
pub fn optimizer_step(
    store: &mut ParamStore,
    state: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if state.first.len() != store.len() {
        return Err(Error::invalid(
            "optimizer state does not match the parameter set",
        ));
    }
    if let Some(p) = store.iter().find(|p| !p.gradient.is_finite()) {
        return Err(Error::NonFiniteGradient(p.name.clone()));
    }
    state.step += 1;
    let t = state.step as f64;
    let c1 = 1.0 - libm::pow(BETA1, t);
    let c2 = 1.0 - libm::pow(BETA2, t);
    let decay = 1.0 - lr * weight_decay;
    for ((p, m), v) in store
        .iter_mut()
        .zip(state.first.iter_mut())
        .zip(state.second.iter_mut())
    {
        let theta = p.tensor.values_mut();
        let grad = p.gradient.values();
        for (((w, &g), m), v) in theta
            .iter_mut()
            .zip(grad)
            .zip(m.values_mut())
            .zip(v.values_mut())
        {
            *w *= decay;
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= lr * m_hat / (libm::sqrt(v_hat) + EPSILON);
        }
    }
    store.zero_grad();
    Ok(())
}

/// Rescales all gradients so their joint norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for p in store.iter_mut() {
            p.gradient.values_mut().iter_mut().for_each(|g| *g *= scale);
        }
    }
    norm
}
