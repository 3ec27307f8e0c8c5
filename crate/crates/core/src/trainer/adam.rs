use serde::{Deserialize, Serialize};

use crate::adgrad::Mat;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment estimates for a list of parameter blocks.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
}

impl AdamState {
    pub fn new(params: &[Mat]) -> Self {
        let zeros: Vec<Mat> = params.iter().map(|p| Mat::zeros(p.nrows(), p.ncols())).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam step descending `grads`, with a learning rate per
/// block. Returns `false` and leaves everything untouched if any gradient is
/// not finite.
pub fn adam_step(params: &mut [Mat], grads: &[Mat], state: &mut AdamState, lrs: &[f64]) -> bool {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), lrs.len());
    if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
        log::warn!("skipping Adam step {}: non-finite gradient", state.step + 1);
        return false;
    }
    if state.m.len() != params.len() {
        *state = AdamState::new(params);
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (((p, g), (m, v)), &lr) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
        .zip(lrs)
    {
        assert_eq!(p.shape(), g.shape(), "gradient shape mismatch");
        for i in 0..p.len() {
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
            p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + EPSILON);
        }
    }
    true
}
