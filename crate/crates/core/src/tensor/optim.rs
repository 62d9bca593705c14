use alloc::vec;
use alloc::vec::Vec;

use super::ParamStore;
use crate::error::{bail, Result};
use crate::math;

/// Adam moments for every parameter of a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(store: &ParamStore, learning_rate: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.get(id).len()]).collect();
        Self {
            second_moment: zeros.clone(),
            first_moment: zeros,
            step_count: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected Adam update using the gradients held in `store`.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState) -> Result<()> {
    if state.first_moment.len() != store.len() {
        bail!(
            Contract,
            "optimizer tracks {} parameters, store has {}",
            state.first_moment.len(),
            store.len()
        );
    }
    for id in store.ids() {
        let t = store.get(id);
        if t.grad().is_none() {
            bail!(Contract, "parameter {} has no gradient", store.name(id));
        }
        if state.first_moment[id.index()].len() != t.len() {
            bail!(Contract, "moment size mismatch for {}", store.name(id));
        }
    }
    state.step_count += 1;
    let t = state.step_count as f64;
    let bc1 = 1.0 - libm::pow(state.beta1, t);
    let bc2 = 1.0 - libm::pow(state.beta2, t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.learning_rate, state.epsilon);
    for id in store.ids() {
        let m = &mut state.first_moment[id.index()];
        let v = &mut state.second_moment[id.index()];
        let param = store.get_mut(id);
        let grad = param.grad().expect("checked above").to_vec();
        for (i, (p, g)) in param.values_mut().iter_mut().zip(grad).enumerate() {
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            *p -= lr * m_hat / (math::sqrt(v_hat) + eps);
        }
    }
    Ok(())
}
