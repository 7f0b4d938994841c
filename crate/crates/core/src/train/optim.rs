use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::ModelParams;
use crate::tensor::{self, Tape, Tensor, Var};

/// Mean squared error over batch and output dimensions.
pub fn mse_loss(tape: &mut Tape, pred: Var, target: Var) -> tensor::Result<Var> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(tensor::TensorError::ShapeMismatch {
            op: "mse_loss",
            lhs: tape.shape(pred).to_vec(),
            rhs: tape.shape(target).to_vec(),
        });
    }
    let d = tape.sub(pred, target)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

/// Mean softmax cross-entropy of `[B, K]` logits.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> tensor::Result<Var> {
    tape.softmax_cross_entropy(logits, labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates per parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

/// One bias-corrected Adam update. Parameters without a gradient entry are
/// left untouched.
pub fn adam_step(params: &mut ModelParams, grads: &BTreeMap<String, Tensor>, state: &mut AdamState, cfg: &AdamConfig) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.tensors.iter_mut() {
        let Some(g) = grads.get(name) else { continue };
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; p.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; p.len()]);
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            *w -= cfg.learning_rate * (*mi / c1) / ((*vi / c2).sqrt() + cfg.eps);
        }
    }
}
