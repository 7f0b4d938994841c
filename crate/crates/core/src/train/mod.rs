//! Losses, optimizer, split protocol, training loop and the synthetic
//! grasp-and-lift generator.

mod data;
mod fit;
mod optim;
mod synthetic;

pub use data::{
    build_windows, fit_kinematics, preprocess_trial, InputScaler, PreparedTrial, PreprocessConfig, TrialBundle,
    TrialEvents, WindowSet,
};
pub use fit::{evaluate_loss, history_table, predict_set, train_loop, EpochRecord, TrainConfig, TrainOutcome};
pub use optim::{adam_step, cross_entropy, mse_loss, AdamConfig, AdamState};
pub use synthetic::{
    generate_dataset, generate_synthetic_trial, trial_snr, SnrReport, SubjectMixing, SyntheticTrialSpec, EEG_CHANNELS, EMG_CHANNELS,
    KIN_NAMES,
};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelError;
use crate::signals::SignalError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("training diverged at epoch {epoch} (non-finite loss)")]
    Diverged { epoch: usize },
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Disjoint trial indices for training, validation and test.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Held-out trials per set on a full 328-trial subject.
pub const HELD_OUT: usize = 30;
const FULL_SUBJECT: usize = 328;

/// Held-out set size for `n` trials: 30, or for fewer than 90 trials the same
/// 30/328 fraction rounded, at least 1.
pub fn held_out_size(n: usize) -> usize {
    if n >= 3 * HELD_OUT {
        HELD_OUT
    } else {
        ((n as f64 * HELD_OUT as f64 / FULL_SUBJECT as f64).round() as usize).max(1)
    }
}

/// Seeded random split of `n` trials; each set is sorted.
pub fn make_split(n_trials: usize, seed: u64) -> Result<SplitPlan> {
    if n_trials < 3 {
        return Err(TrainError::Data(format!("{n_trials} trials cannot be split three ways")));
    }
    let k = held_out_size(n_trials);
    let mut ids: Vec<usize> = (0..n_trials).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let sorted = |s: &[usize]| {
        let mut v = s.to_vec();
        v.sort_unstable();
        v
    };
    Ok(SplitPlan {
        val: sorted(&ids[..k]),
        test: sorted(&ids[k..2 * k]),
        train: sorted(&ids[2 * k..]),
    })
}
