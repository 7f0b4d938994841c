use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::WindowSet;
use super::optim::{adam_step, cross_entropy, mse_loss, AdamConfig, AdamState};
use super::{Result, TrainError};
use crate::model::{Decoder, DecoderOutput, ModelConfig, ParamVars};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Epochs without validation improvement before stopping; `None` disables.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 64,
            seed: 0,
            adam: AdamConfig::default(),
            patience: Some(20),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::Config("epochs and batch_size must be positive".into()));
        }
        let a = &self.adam;
        if !(a.learning_rate > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(TrainError::Config(format!("invalid optimizer settings {a:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    /// Parameters from the best epoch.
    pub model: Decoder,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    /// Set when the training loss rose at some epoch after the fifth.
    pub non_monotone: bool,
}

/// `epoch,train_loss,val_loss` table, one row per epoch.
pub fn history_table(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss\n");
    for r in history {
        let val = r.val_loss.map_or(String::new(), |v| format!("{v:.9e}"));
        let _ = writeln!(s, "{},{:.9e},{val}", r.epoch, r.train_loss);
    }
    s
}

fn batch_loss(
    model: &Decoder,
    tape: &mut Tape,
    p: &ParamVars,
    set: &WindowSet,
    idx: &[usize],
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let eeg = set.eeg_batch(idx);
    let emg = set.emg_batch(idx);
    let trace = model.forward(tape, p, &eeg, emg.as_ref(), rng)?;
    let loss = if model.config.out_dim == 5 {
        let labels = set.label_batch(idx)?;
        cross_entropy(tape, trace.output, &labels)?
    } else {
        let y = tape.constant(set.target_batch(idx));
        mse_loss(tape, trace.output, y)?
    };
    Ok(loss)
}

fn check_set(config: &ModelConfig, set: &WindowSet) -> Result<()> {
    if set.is_empty() {
        return Err(TrainError::Data("window set is empty".into()));
    }
    if set.window != config.window_samples
        || set.eeg_channels != config.in_channels_eeg
        || set.emg_channels != config.in_channels_emg
    {
        return Err(TrainError::Data(format!(
            "windows are {} EEG + {} EMG channels × {} samples, model expects {} + {} × {}",
            set.eeg_channels,
            set.emg_channels,
            set.window,
            config.in_channels_eeg,
            config.in_channels_emg,
            config.window_samples
        )));
    }
    Ok(())
}

/// Mean evaluation-mode loss over a window set.
pub fn evaluate_loss(model: &Decoder, set: &WindowSet, batch_size: usize) -> Result<f64> {
    check_set(&model.config, set)?;
    let all: Vec<usize> = (0..set.len()).collect();
    let mut total = 0.0;
    for idx in all.chunks(batch_size.max(1)) {
        let mut tape = Tape::new();
        let p = ParamVars::register(&mut tape, &model.params, false);
        let loss = batch_loss(model, &mut tape, &p, set, idx, None)?;
        total += tape.value(loss).data()[0] * idx.len() as f64;
    }
    Ok(total / set.len() as f64)
}

/// Evaluation-mode outputs and latents for every window, in order.
pub fn predict_set(model: &Decoder, set: &WindowSet, batch_size: usize) -> Result<DecoderOutput> {
    check_set(&model.config, set)?;
    let all: Vec<usize> = (0..set.len()).collect();
    let (mut out, mut lat) = (Vec::new(), Vec::new());
    for idx in all.chunks(batch_size.max(1)) {
        let eeg = set.eeg_batch(idx);
        let emg = set.emg_batch(idx);
        let y = model.predict(&eeg, emg.as_ref())?;
        out.extend_from_slice(y.output.data());
        lat.extend_from_slice(y.latent.data());
    }
    let n = set.len();
    Ok(DecoderOutput {
        output: Tensor::new([n, model.config.out_dim], out)?,
        latent: Tensor::new([n, model.config.embed_dim], lat)?,
    })
}

/// Mini-batch Adam training with early stopping on the validation loss (or
/// the training loss when no validation set is given).
pub fn train_loop(config: &ModelConfig, train: &WindowSet, val: Option<&WindowSet>, tc: &TrainConfig) -> Result<TrainOutcome> {
    tc.validate()?;
    config.validate()?;
    check_set(config, train)?;
    if let Some(v) = val {
        check_set(config, v)?;
    }
    let mut model = Decoder::new(config.clone(), tc.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(1));
    let mut state = AdamState::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut best = (f64::INFINITY, 0usize, model.clone());
    let mut stopped_early = false;

    for epoch in 1..=tc.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for idx in order.chunks(tc.batch_size) {
            let mut tape = Tape::new();
            let p = ParamVars::register(&mut tape, &model.params, true);
            let loss = batch_loss(&model, &mut tape, &p, train, idx, Some(&mut rng))?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(TrainError::Diverged { epoch });
            }
            total += value * idx.len() as f64;
            tape.backward(loss)?;
            let grads: BTreeMap<String, Tensor> = p
                .vars
                .iter()
                .map(|(k, &v)| (k.clone(), tape.grad(v).expect("parameters require grad")))
                .collect();
            adam_step(&mut model.params, &grads, &mut state, &tc.adam);
        }
        let train_loss = total / train.len() as f64;
        let val_loss = match val {
            Some(v) => Some(evaluate_loss(&model, v, tc.batch_size)?),
            None => None,
        };
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        log::debug!("epoch {epoch}: train {train_loss:.6e} val {val_loss:?}");
        let score = val_loss.unwrap_or(train_loss);
        if score < best.0 {
            best = (score, epoch, model.clone());
        } else if let Some(patience) = tc.patience {
            if epoch - best.1 > patience {
                stopped_early = true;
                break;
            }
        }
    }
    let non_monotone = history
        .windows(2)
        .skip(4)
        .any(|w| w[1].train_loss > w[0].train_loss);
    if non_monotone {
        log::warn!("training loss rose after epoch 5");
    }
    Ok(TrainOutcome {
        model: best.2,
        history,
        best_epoch: best.1,
        stopped_early,
        non_monotone,
    })
}
