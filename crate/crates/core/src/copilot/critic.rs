use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CopilotError, Result};
use crate::kinematics::KIN_DIMS;
use crate::model::{ModelParams, ParamVars};
use crate::tensor::{Tape, Tensor};
use crate::train::{adam_step, mse_loss, AdamConfig, AdamState};

/// Critic input: decoder latent, then the 5-way posterior, then local jerk.
pub fn critic_features(latent: &[f64], posterior: &[f64; 5], jerk: f64) -> Vec<f64> {
    let mut f = Vec::with_capacity(latent.len() + 6);
    f.extend_from_slice(latent);
    f.extend_from_slice(posterior);
    f.push(jerk);
    f
}

/// Norm of the backward third difference of the decoded sequence, with
/// indices clamped at the start.
pub fn local_jerk(outputs: &[[f64; KIN_DIMS]]) -> Vec<f64> {
    let at = |i: isize| outputs[i.max(0) as usize];
    (0..outputs.len() as isize)
        .map(|i| {
            let (a, b, c, d) = (at(i), at(i - 1), at(i - 2), at(i - 3));
            (0..KIN_DIMS)
                .map(|k| {
                    let j = a[k] - 3.0 * b[k] + 3.0 * c[k] - d[k];
                    j * j
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

/// Row-wise softmax of classifier logits.
pub fn softmax5(logits: &[f64]) -> Result<[f64; 5]> {
    if logits.len() != 5 || logits.iter().any(|v| !v.is_finite()) {
        return Err(CopilotError::Input(format!("expected 5 finite logits, got {logits:?}")));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(std::array::from_fn(|i| e[i] / z))
}

/// RMS over the six output dimensions.
pub fn point_error(pred: &[f64; KIN_DIMS], truth: &[f64; KIN_DIMS]) -> f64 {
    (pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / KIN_DIMS as f64).sqrt()
}

/// `α = ln 2 / median(e)`, so the median error maps to a target of 0.5.
pub fn alpha_from_errors(errors: &[f64]) -> Result<f64> {
    let mut e: Vec<f64> = errors.to_vec();
    if e.is_empty() || e.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(CopilotError::Input("errors must be finite and non-negative".into()));
    }
    e.sort_by(f64::total_cmp);
    let n = e.len();
    let median = if n % 2 == 1 { e[n / 2] } else { (e[n / 2 - 1] + e[n / 2]) / 2.0 };
    if median <= 0.0 {
        return Err(CopilotError::Input("median training error is zero".into()));
    }
    Ok(std::f64::consts::LN_2 / median)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriticConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            epochs: 150,
            batch_size: 64,
            learning_rate: 3e-3,
            seed: 0,
        }
    }
}

/// Feed-forward confidence model: standardize, dense → ELU → dense → sigmoid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Critic {
    pub input_dim: usize,
    pub hidden: usize,
    pub alpha: f64,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// `[input_dim, hidden]`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl Critic {
    /// All weights zero, identity standardization.
    pub fn zeroed(input_dim: usize, hidden: usize) -> Self {
        Self {
            input_dim,
            hidden,
            alpha: 1.0,
            mean: vec![0.0; input_dim],
            std: vec![1.0; input_dim],
            w1: vec![0.0; input_dim * hidden],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden],
            b2: 0.0,
        }
    }

    fn params(&self) -> ModelParams {
        let t = |shape: Vec<usize>, data: &[f64]| Tensor::new(shape, data.to_vec()).expect("critic shapes agree");
        ModelParams {
            tensors: BTreeMap::from([
                ("w1".to_string(), t(vec![self.input_dim, self.hidden], &self.w1)),
                ("b1".to_string(), t(vec![self.hidden], &self.b1)),
                ("w2".to_string(), t(vec![self.hidden, 1], &self.w2)),
                ("b2".to_string(), t(vec![1], &[self.b2])),
            ]),
        }
    }

    fn set_params(&mut self, p: &ModelParams) {
        let get = |k: &str| p.tensors[k].data().to_vec();
        self.w1 = get("w1");
        self.b1 = get("b1");
        self.w2 = get("w2");
        self.b2 = get("b2")[0];
    }

    fn standardized(&self, rows: &[Vec<f64>]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(rows.len() * self.input_dim);
        for r in rows {
            if r.len() != self.input_dim {
                return Err(CopilotError::Input(format!(
                    "critic expects {} features, got {}",
                    self.input_dim,
                    r.len()
                )));
            }
            if r.iter().any(|v| !v.is_finite()) {
                return Err(CopilotError::Input("non-finite critic feature".into()));
            }
            data.extend(r.iter().enumerate().map(|(j, v)| (v - self.mean[j]) / self.std[j]));
        }
        Ok(Tensor::new([rows.len(), self.input_dim], data)?)
    }

    fn forward(&self, tape: &mut Tape, pv: &ParamVars, x: Tensor) -> Result<crate::tensor::Var> {
        let x = tape.constant(x);
        let h = tape.dense(x, pv.get("w1")?, pv.get("b1")?)?;
        let h = tape.elu(h, 1.0);
        let o = tape.dense(h, pv.get("w2")?, pv.get("b2")?)?;
        Ok(tape.sigmoid(o))
    }

    /// Confidence in `[0, 1]` for each feature row.
    pub fn score_batch(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let pv = ParamVars::register(&mut tape, &self.params(), false);
        let x = self.standardized(rows)?;
        let out = self.forward(&mut tape, &pv, x)?;
        Ok(tape.value(out).data().iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }

    pub fn score(&self, latent: &[f64], posterior: &[f64; 5], jerk: f64) -> Result<f64> {
        Ok(self.score_batch(&[critic_features(latent, posterior, jerk)])?[0])
    }

    /// Fits on feature rows and per-point decoding errors with target
    /// `exp(−α·e)`.
    pub fn train(rows: &[Vec<f64>], errors: &[f64], cfg: &CriticConfig) -> Result<Self> {
        if rows.len() != errors.len() || rows.is_empty() {
            return Err(CopilotError::Input(format!(
                "{} feature rows for {} errors",
                rows.len(),
                errors.len()
            )));
        }
        if cfg.hidden == 0 || cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
            return Err(CopilotError::Input(format!("invalid critic config {cfg:?}")));
        }
        let dim = rows[0].len();
        let n = rows.len() as f64;
        let mut critic = Self::zeroed(dim, cfg.hidden);
        critic.alpha = alpha_from_errors(errors)?;
        for j in 0..dim {
            let m = rows.iter().map(|r| r.get(j).copied().unwrap_or(0.0)).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r.get(j).copied().unwrap_or(0.0) - m).powi(2)).sum::<f64>() / n;
            critic.mean[j] = m;
            critic.std[j] = if var > 1e-24 { var.sqrt() } else { 1.0 };
        }
        let x_all = critic.standardized(rows)?;
        let targets: Vec<f64> = errors.iter().map(|e| (-critic.alpha * e).exp()).collect();

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let limit1 = (6.0 / (dim + cfg.hidden) as f64).sqrt();
        critic.w1 = (0..dim * cfg.hidden).map(|_| rng.gen_range(-limit1..limit1)).collect();
        let limit2 = (6.0 / (cfg.hidden + 1) as f64).sqrt();
        critic.w2 = (0..cfg.hidden).map(|_| rng.gen_range(-limit2..limit2)).collect();

        let mut params = critic.params();
        let adam = AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        };
        let mut state = AdamState::default();
        let mut order: Vec<usize> = (0..rows.len()).collect();
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for batch in order.chunks(cfg.batch_size) {
                let x = Tensor::new(
                    [batch.len(), dim],
                    batch.iter().flat_map(|&i| x_all.data()[i * dim..(i + 1) * dim].iter().copied()).collect(),
                )?;
                let y = Tensor::new([batch.len(), 1], batch.iter().map(|&i| targets[i]).collect())?;
                let mut tape = Tape::new();
                let pv = ParamVars::register(&mut tape, &params, true);
                critic.set_params(&params);
                let pred = critic.forward(&mut tape, &pv, x)?;
                let y = tape.constant(y);
                let loss = mse_loss(&mut tape, pred, y)?;
                tape.backward(loss)?;
                let grads = pv
                    .vars
                    .iter()
                    .filter_map(|(k, &v)| tape.grad(v).map(|g| (k.clone(), g)))
                    .collect();
                adam_step(&mut params, &grads, &mut state, &adam);
            }
        }
        critic.set_params(&params);
        if critic.w1.iter().chain(&critic.w2).any(|v| !v.is_finite()) {
            return Err(CopilotError::Input("critic training diverged".into()));
        }
        Ok(critic)
    }
}
