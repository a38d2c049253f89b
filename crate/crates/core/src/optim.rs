//! Adam optimizer over named parameter tensors, plus global-norm clipping.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::fmath;
use crate::model::ModelParameters;

/// Gradients keyed like the parameters they belong to.
pub type GradMap = BTreeMap<String, Vec<f64>>;

#[derive(Clone, Copy, PartialEq, Debug)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { learning_rate: 4e-4, beta1: 0.8, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment buffers and the shared step counter.
#[derive(Clone, Default, Debug, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new() -> Self {
        AdamState::default()
    }
}

/// One Adam step with bias correction. Parameters without a gradient entry
/// are treated as zero-gradient (and stay put while their moments are zero).
pub fn adam_update(
    params: &mut ModelParameters,
    grads: &GradMap,
    state: &mut AdamState,
    hyper: &AdamHyper,
) {
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - fmath::powf(hyper.beta1, t);
    let bc2 = 1.0 - fmath::powf(hyper.beta2, t);
    let zero: Vec<f64> = Vec::new();
    for (name, tensor) in params.iter_mut() {
        let n = tensor.values.len();
        let g = grads.get(name).unwrap_or(&zero);
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        for i in 0..n {
            let gi = if g.is_empty() { 0.0 } else { g[i] };
            m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * gi;
            v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            tensor.values[i] -= hyper.learning_rate * m_hat / (fmath::sqrt(v_hat) + hyper.eps);
        }
    }
}

/// Scale all gradients so their joint L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut GradMap, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.values() {
        for &x in g {
            sq += x * x;
        }
    }
    let norm = fmath::sqrt(sq);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }
    norm
}
