use serde::{Deserialize, Serialize};

use super::{Result, TrainError};
use crate::copilot::MotionState;
use crate::signals::{
    common_average_reference, decimate, design_bandpass, design_lowpass, filter_forward_backward,
    slice_windows, NormalizationParams, TimeSeriesBlock, WindowSpec,
};
use crate::tensor::Tensor;

/// Sensor channels sampled at the EEG rate, used by the copilot rules.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialEvents {
    pub contact_force: Vec<f64>,
    pub object_height: Vec<f64>,
    pub object_vz: Vec<f64>,
    pub trial_end: Vec<f64>,
}

impl TrialEvents {
    pub const FEATURES: [&'static str; 4] = ["contact_force", "object_height", "object_vz", "trial_end"];

    pub fn feature(&self, name: &str) -> Option<&[f64]> {
        match name {
            "contact_force" => Some(&self.contact_force),
            "object_height" => Some(&self.object_height),
            "object_vz" => Some(&self.object_vz),
            "trial_end" => Some(&self.trial_end),
            _ => None,
        }
    }

    pub fn len(&self) -> usize {
        self.contact_force.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contact_force.is_empty()
    }

    /// Values of every feature at sample `i`, in [`Self::FEATURES`] order.
    pub fn at(&self, i: usize) -> [f64; 4] {
        [self.contact_force[i], self.object_height[i], self.object_vz[i], self.trial_end[i]]
    }
}

/// One recorded (or generated) trial.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialBundle {
    pub id: String,
    pub eeg: TimeSeriesBlock,
    pub emg: TimeSeriesBlock,
    pub kin: TimeSeriesBlock,
    pub labels: Option<Vec<MotionState>>,
    pub events: Option<TrialEvents>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    pub eeg_low_hz: f64,
    pub eeg_high_hz: f64,
    pub eeg_order: usize,
    pub emg_low_hz: f64,
    pub emg_high_hz: f64,
    pub emg_order: usize,
    pub emg_decimation: i64,
    /// Inserts a low-pass guard before EMG decimation.
    pub antialias: bool,
    pub antialias_hz: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            eeg_low_hz: 0.1,
            eeg_high_hz: 40.0,
            eeg_order: 4,
            emg_low_hz: 20.0,
            emg_high_hz: 450.0,
            emg_order: 4,
            emg_decimation: 8,
            antialias: false,
            antialias_hz: 200.0,
        }
    }
}

/// A trial after filtering, referencing and EMG resampling, with all
/// modalities at the EEG rate and trimmed to a common length.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedTrial {
    pub id: String,
    pub eeg: TimeSeriesBlock,
    pub emg: TimeSeriesBlock,
    pub kin: TimeSeriesBlock,
    pub labels: Option<Vec<MotionState>>,
    pub events: Option<TrialEvents>,
}

fn trim(block: &TimeSeriesBlock, n: usize) -> Result<TimeSeriesBlock> {
    let data = block.data().iter().map(|r| r[..n].to_vec()).collect();
    Ok(TimeSeriesBlock::new(
        data,
        block.rate_hz(),
        block.kind(),
        block.channel_names().to_vec(),
    )?)
}

pub fn preprocess_trial(trial: &TrialBundle, cfg: &PreprocessConfig) -> Result<PreparedTrial> {
    let eeg_filter = design_bandpass(cfg.eeg_low_hz, cfg.eeg_high_hz, cfg.eeg_order, trial.eeg.rate_hz())?;
    let eeg = common_average_reference(&filter_forward_backward(&trial.eeg, &eeg_filter)?)?;
    let emg_filter = design_bandpass(cfg.emg_low_hz, cfg.emg_high_hz, cfg.emg_order, trial.emg.rate_hz())?;
    let mut emg = filter_forward_backward(&trial.emg, &emg_filter)?;
    if cfg.antialias {
        let guard = design_lowpass(cfg.antialias_hz, cfg.emg_order, emg.rate_hz())?;
        emg = filter_forward_backward(&emg, &guard)?;
    }
    let emg = decimate(&emg, cfg.emg_decimation)?;
    if (emg.rate_hz() - eeg.rate_hz()).abs() > 1e-9 || (trial.kin.rate_hz() - eeg.rate_hz()).abs() > 1e-9 {
        return Err(TrainError::Data(format!(
            "trial {}: rates after resampling differ (EEG {} Hz, EMG {} Hz, kinematics {} Hz)",
            trial.id,
            eeg.rate_hz(),
            emg.rate_hz(),
            trial.kin.rate_hz()
        )));
    }
    let n = eeg.samples().min(emg.samples()).min(trial.kin.samples());
    Ok(PreparedTrial {
        id: trial.id.clone(),
        eeg: trim(&eeg, n)?,
        emg: trim(&emg, n)?,
        kin: trim(&trial.kin, n)?,
        labels: trial.labels.as_ref().map(|l| l[..n.min(l.len())].to_vec()),
        events: trial.events.clone(),
    })
}

/// Per-channel mean and standard deviation of the network inputs, fitted on
/// training trials.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputScaler {
    pub eeg_mean: Vec<f64>,
    pub eeg_std: Vec<f64>,
    pub emg_mean: Vec<f64>,
    pub emg_std: Vec<f64>,
}

fn channel_stats(blocks: &[&TimeSeriesBlock]) -> (Vec<f64>, Vec<f64>) {
    let c = blocks[0].channels();
    let mut mean = vec![0.0; c];
    let mut sq = vec![0.0; c];
    let mut n = 0usize;
    for b in blocks {
        for (ch, row) in b.data().iter().enumerate() {
            mean[ch] += row.iter().sum::<f64>();
            sq[ch] += row.iter().map(|v| v * v).sum::<f64>();
        }
        n += b.samples();
    }
    let n = n.max(1) as f64;
    let std = mean
        .iter()
        .zip(&sq)
        .map(|(s, q)| {
            let m = s / n;
            let var = (q / n - m * m).max(0.0);
            if var > 0.0 { var.sqrt() } else { 1.0 }
        })
        .collect();
    (mean.iter().map(|s| s / n).collect(), std)
}

impl InputScaler {
    pub fn fit(trials: &[PreparedTrial]) -> Result<Self> {
        if trials.is_empty() {
            return Err(TrainError::Data("no trials to fit input scaling".into()));
        }
        let (eeg_mean, eeg_std) = channel_stats(&trials.iter().map(|t| &t.eeg).collect::<Vec<_>>());
        let (emg_mean, emg_std) = channel_stats(&trials.iter().map(|t| &t.emg).collect::<Vec<_>>());
        Ok(Self {
            eeg_mean,
            eeg_std,
            emg_mean,
            emg_std,
        })
    }
}

/// Fits min-max kinematics normalization over several training trials.
pub fn fit_kinematics(trials: &[PreparedTrial]) -> Result<NormalizationParams> {
    let mut iter = trials.iter();
    let first = iter
        .next()
        .ok_or_else(|| TrainError::Data("no trials to fit normalization".into()))?;
    let mut p = crate::signals::fit_minmax(&first.kin)?;
    for t in iter {
        p.merge(&crate::signals::fit_minmax(&t.kin)?)?;
    }
    Ok(p)
}

/// Flattened input windows with their targets, ready for batching.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSet {
    pub eeg_channels: usize,
    pub emg_channels: usize,
    pub window: usize,
    /// `n × eeg_channels × window`
    pub eeg: Vec<f64>,
    /// `n × emg_channels × window`, empty without EMG
    pub emg: Vec<f64>,
    /// `n × 6` normalized kinematics at the delayed target sample
    pub targets: Vec<f64>,
    /// State label at the target sample, when available
    pub labels: Vec<Option<MotionState>>,
    /// Index into the trial list the set was built from
    pub trial: Vec<usize>,
    pub target_index: Vec<usize>,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.targets.len() / 6
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn has_emg(&self) -> bool {
        self.emg_channels > 0
    }

    pub fn eeg_batch(&self, idx: &[usize]) -> Tensor {
        gather(&self.eeg, self.eeg_channels * self.window, idx, &[idx.len(), self.eeg_channels, self.window])
    }

    pub fn emg_batch(&self, idx: &[usize]) -> Option<Tensor> {
        self.has_emg()
            .then(|| gather(&self.emg, self.emg_channels * self.window, idx, &[idx.len(), self.emg_channels, self.window]))
    }

    pub fn target_batch(&self, idx: &[usize]) -> Tensor {
        gather(&self.targets, 6, idx, &[idx.len(), 6])
    }

    pub fn label_batch(&self, idx: &[usize]) -> Result<Vec<usize>> {
        idx.iter()
            .map(|&i| {
                self.labels[i]
                    .and_then(MotionState::index)
                    .ok_or_else(|| TrainError::Data(format!("window {i} has no state label")))
            })
            .collect()
    }

    pub fn target(&self, i: usize) -> &[f64] {
        &self.targets[i * 6..(i + 1) * 6]
    }

    /// Subset by window index, preserving order.
    pub fn select(&self, idx: &[usize]) -> WindowSet {
        let pick = |src: &[f64], w: usize| idx.iter().flat_map(|&i| src[i * w..(i + 1) * w].iter().copied()).collect();
        WindowSet {
            eeg_channels: self.eeg_channels,
            emg_channels: self.emg_channels,
            window: self.window,
            eeg: pick(&self.eeg, self.eeg_channels * self.window),
            emg: pick(&self.emg, self.emg_channels * self.window),
            targets: pick(&self.targets, 6),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            trial: idx.iter().map(|&i| self.trial[i]).collect(),
            target_index: idx.iter().map(|&i| self.target_index[i]).collect(),
        }
    }
}

fn gather(src: &[f64], width: usize, idx: &[usize], shape: &[usize]) -> Tensor {
    let mut data = Vec::with_capacity(idx.len() * width);
    for &i in idx {
        data.extend_from_slice(&src[i * width..(i + 1) * width]);
    }
    Tensor::new(shape.to_vec(), data).expect("window gather shape")
}

fn scale_rows(block: &TimeSeriesBlock, mean: &[f64], std: &[f64]) -> Result<TimeSeriesBlock> {
    if block.channels() != mean.len() {
        return Err(TrainError::Data(format!(
            "{} channels, scaler fitted on {}",
            block.channels(),
            mean.len()
        )));
    }
    let data = block
        .data()
        .iter()
        .enumerate()
        .map(|(c, row)| row.iter().map(|v| (v - mean[c]) / std[c]).collect())
        .collect();
    Ok(TimeSeriesBlock::new(data, block.rate_hz(), block.kind(), block.channel_names().to_vec())?)
}

/// Slices every trial into windows. EMG windows share the EEG window indices.
pub fn build_windows(
    trials: &[PreparedTrial],
    norm: &NormalizationParams,
    scaler: &InputScaler,
    spec: &WindowSpec,
    with_emg: bool,
) -> Result<WindowSet> {
    let first = trials.first().ok_or_else(|| TrainError::Data("no trials to window".into()))?;
    let mut set = WindowSet {
        eeg_channels: first.eeg.channels(),
        emg_channels: if with_emg { first.emg.channels() } else { 0 },
        window: spec.window_samples,
        eeg: Vec::new(),
        emg: Vec::new(),
        targets: Vec::new(),
        labels: Vec::new(),
        trial: Vec::new(),
        target_index: Vec::new(),
    };
    for (ti, trial) in trials.iter().enumerate() {
        let kin = crate::signals::apply_minmax(&trial.kin, norm)?;
        let eeg = scale_rows(&trial.eeg, &scaler.eeg_mean, &scaler.eeg_std)?;
        let slices = slice_windows(&eeg, &kin, spec)?;
        let emg = if with_emg {
            Some(scale_rows(&trial.emg, &scaler.emg_mean, &scaler.emg_std)?)
        } else {
            None
        };
        for pair in slices.pairs {
            if pair.input.len() != set.eeg_channels {
                return Err(TrainError::Data(format!("trial {} has {} EEG channels", trial.id, pair.input.len())));
            }
            for row in &pair.input {
                set.eeg.extend_from_slice(row);
            }
            if let Some(emg) = &emg {
                if emg.channels() != set.emg_channels {
                    return Err(TrainError::Data(format!("trial {} has {} EMG channels", trial.id, emg.channels())));
                }
                let start = pair.end_index + 1 - spec.window_samples;
                for row in emg.data() {
                    set.emg.extend_from_slice(&row[start..=pair.end_index]);
                }
            }
            set.targets.extend_from_slice(&pair.target);
            set.labels
                .push(trial.labels.as_ref().and_then(|l| l.get(pair.target_index).copied()));
            set.trial.push(ti);
            set.target_index.push(pair.target_index);
        }
    }
    Ok(set)
}
