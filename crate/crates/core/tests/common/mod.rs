#![allow(dead_code)]

pub mod grad;
pub mod oracles;

use kinedec::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Values bounded away from zero, for ops with a kink at the origin.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.gen_range(0.1..1.5);
        if rng.gen_bool(0.5) { m } else { -m }
    })
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Two-pass Pearson correlation, independent of the library metric.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

pub mod pipeline {
    use kinedec::model::ModelConfig;
    use kinedec::signals::WindowSpec;
    use kinedec::train::{
        build_windows, fit_kinematics, generate_dataset, preprocess_trial, InputScaler, PreparedTrial,
        PreprocessConfig, SyntheticTrialSpec, TrainConfig, WindowSet,
    };

    pub fn prepared(spec: &SyntheticTrialSpec, trials: usize, seed: u64) -> Vec<PreparedTrial> {
        generate_dataset(spec, trials, seed)
            .unwrap()
            .iter()
            .map(|t| preprocess_trial(t, &PreprocessConfig::default()).unwrap())
            .collect()
    }

    /// Windows of `eval` scaled with statistics fitted on `fit`.
    pub fn windows(fit: &[PreparedTrial], eval: &[PreparedTrial], spec: &WindowSpec, emg: bool) -> WindowSet {
        let norm = fit_kinematics(fit).unwrap();
        let scaler = InputScaler::fit(fit).unwrap();
        build_windows(eval, &norm, &scaler, spec, emg).unwrap()
    }

    /// Small decoder that trains in seconds on one core.
    pub fn compact_config(window: usize, emg_channels: usize) -> ModelConfig {
        ModelConfig {
            in_channels_emg: emg_channels,
            window_samples: window,
            large_kernel: 33,
            large_features: 2,
            branch_kernels: vec![5, 9],
            branch_features: 2,
            pool_k: 5,
            pool_s: 5,
            se_reduction: 8,
            embed_dim: 32,
            heads: 4,
            head_dim: 8,
            dropout: 0.1,
            ..ModelConfig::default()
        }
    }

    /// 64 windows of two short-window trials and a matching dropout-free model.
    pub fn overfit_set() -> (ModelConfig, WindowSet) {
        let trials = prepared(&SyntheticTrialSpec::default(), 2, 21);
        let spec = WindowSpec::new(64, 32, 100, 500.0).unwrap();
        let set = windows(&trials, &trials, &spec, false);
        let set = set.select(&(0..64).collect::<Vec<_>>());
        let cfg = ModelConfig {
            large_kernel: 17,
            branch_kernels: vec![3, 7],
            pool_k: 4,
            pool_s: 4,
            dropout: 0.0,
            ..compact_config(64, 0)
        };
        (cfg, set)
    }

    pub fn overfit_config() -> TrainConfig {
        TrainConfig {
            epochs: 200,
            batch_size: 16,
            seed: 3,
            patience: None,
            ..TrainConfig::default()
        }
    }
}
