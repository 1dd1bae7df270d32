//! Bias-corrected Adam.

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// First and second moments for every parameter of one store, in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub hyper: AdamHyper,
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl AdamState {
    pub fn new(params: &ParamStore<f32>) -> Self {
        let zeros: Vec<_> = params.iter().map(|(_, _, p)| p.value.zeros_like()).collect();
        AdamState { hyper: AdamHyper::default(), step: 0, m: zeros.clone(), v: zeros }
    }
}

/// One update from the gradients accumulated in `params`.
///
/// A non-finite gradient rejects the whole step before anything changes.
pub fn adam_step(params: &mut ParamStore<f32>, state: &mut AdamState, lr: f64) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::shape(format!(
            "optimizer holds {} moments for {} parameters",
            state.m.len(),
            params.len()
        )));
    }
    for (k, (_, name, p)) in params.iter().enumerate() {
        if p.grad.shape() != state.m[k].shape() {
            return Err(Error::shape(format!("moment shape mismatch for `{name}`")));
        }
        if let Some(i) = p.grad.data().iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of `{name}` at element {i}")));
        }
    }
    state.step += 1;
    let AdamHyper { beta1, beta2, epsilon } = state.hyper;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (k, (_, p)) in params.iter_mut().enumerate() {
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        let g = p.grad.data();
        let w = p.value.data_mut();
        for i in 0..w.len() {
            let gi = g[i] as f64;
            let mi = beta1 * m[i] as f64 + (1.0 - beta1) * gi;
            let vi = beta2 * v[i] as f64 + (1.0 - beta2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let mh = mi / c1;
            let vh = vi / c2;
            w[i] = (w[i] as f64 - lr * mh / (vh.sqrt() + epsilon)) as f32;
        }
    }
    Ok(())
}
