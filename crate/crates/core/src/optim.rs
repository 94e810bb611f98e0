//! Adam updates over raw parameter buffers.
//!
//! Parameters live in plain `Vec<f64>` buffers owned by their model structs;
//! each buffer pairs with one [`AdamState`]. The tape is rebuilt every
//! iteration, so the optimizer never sees tensors, only values and gradients.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Adam {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// One bias-corrected update. Rejects non-finite gradients so a NaN
    /// never silently poisons the parameters.
    pub fn step(&self, state: &mut AdamState, value: &mut [f64], grad: &[f64]) -> Result<()> {
        if value.len() != grad.len() || state.m.len() != value.len() {
            return Err(Error::dim(
                "adam",
                format!(
                    "parameter len {}, gradient len {}, state len {}",
                    value.len(),
                    grad.len(),
                    state.m.len()
                ),
            ));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "adam: non-finite gradient at component {i}"
            )));
        }
        state.t += 1;
        let t = state.t as f64;
        let c1 = 1.0 - self.beta1.powf(t);
        let c2 = 1.0 - self.beta2.powf(t);
        for i in 0..value.len() {
            let g = grad[i];
            state.m[i] = self.beta1 * state.m[i] + (1.0 - self.beta1) * g;
            state.v[i] = self.beta2 * state.v[i] + (1.0 - self.beta2) * g * g;
            let mh = state.m[i] / c1;
            let vh = state.v[i] / c2;
            value[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> AdamState {
        AdamState { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }
}
