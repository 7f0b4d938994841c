//! Deterministic preprocessing of EEG, EMG and kinematic recordings.
//!
//! Every operation here is a pure function of its inputs. The usual chain is
//! band-pass ([`design_bandpass`] + [`filter_forward_backward`]) followed by
//! [`common_average_reference`] for EEG, band-pass then [`decimate`] for EMG,
//! and min-max scaling ([`fit_minmax`], [`apply_minmax`]) for kinematics.
//! [`slice_windows`] finally pairs input windows with delayed targets.

mod filter;
mod normalize;
mod window;

pub use filter::{
    design_bandpass, design_lowpass, filter_forward_backward, filtfilt, Biquad, FilterBand,
    FilterDesign, SosFilter,
};
pub use normalize::{apply_minmax, fit_minmax, inverse_minmax, NormalizationParams};
pub use window::{slice_windows, window_targets, SliceStatus, WindowPair, WindowSlices, WindowSpec};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SignalError {
    #[error("invalid band edges: {0}")]
    InvalidBand(String),
    #[error("filter order must be at least 1")]
    InvalidOrder,
    #[error("input has {len} samples per channel, zero-phase filtering needs at least {min}")]
    TooShort { len: usize, min: usize },
    #[error("{0}")]
    InvalidBlock(String),
    #[error("common average reference needs at least 2 channels, got {0}")]
    TooFewChannels(usize),
    #[error("operation expects {expected:?} data, got {got:?}")]
    WrongKind { expected: SignalKind, got: SignalKind },
    #[error("decimation factor must be at least 1, got {0}")]
    InvalidFactor(i64),
    #[error("decimating {samples} samples by {factor} leaves no output")]
    EmptyOutput { samples: usize, factor: usize },
    #[error("no samples to fit normalization")]
    NoData,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid window spec: {0}")]
    InvalidWindow(String),
}

pub type Result<T> = std::result::Result<T, SignalError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignalKind {
    Eeg,
    Emg,
    Kin,
}

impl SignalKind {
    /// Channel count of real recordings of this kind.
    pub fn expected_channels(self) -> usize {
        match self {
            SignalKind::Eeg => 32,
            SignalKind::Emg => 5,
            SignalKind::Kin => 6,
        }
    }
}

/// A channels × samples recording segment.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesBlock {
    data: Vec<Vec<f64>>,
    rate_hz: f64,
    kind: SignalKind,
    channel_names: Vec<String>,
}

impl TimeSeriesBlock {
    pub fn new(
        data: Vec<Vec<f64>>,
        rate_hz: f64,
        kind: SignalKind,
        channel_names: Vec<String>,
    ) -> Result<Self> {
        if !(rate_hz > 0.0 && rate_hz.is_finite()) {
            return Err(SignalError::InvalidBlock(format!(
                "sampling rate must be positive, got {rate_hz}"
            )));
        }
        if channel_names.len() != data.len() {
            return Err(SignalError::InvalidBlock(format!(
                "{} channel names for {} channels",
                channel_names.len(),
                data.len()
            )));
        }
        if let Some(first) = data.first() {
            if data.iter().any(|row| row.len() != first.len()) {
                return Err(SignalError::InvalidBlock("rows differ in length".into()));
            }
        }
        if data.iter().flatten().any(|v| !v.is_finite()) {
            return Err(SignalError::InvalidBlock("non-finite sample".into()));
        }
        Ok(Self {
            data,
            rate_hz,
            kind,
            channel_names,
        })
    }

    /// Builds a block with generated channel names (`<kind><index>`).
    pub fn with_default_names(data: Vec<Vec<f64>>, rate_hz: f64, kind: SignalKind) -> Result<Self> {
        let prefix = match kind {
            SignalKind::Eeg => "eeg",
            SignalKind::Emg => "emg",
            SignalKind::Kin => "kin",
        };
        let names = (0..data.len()).map(|i| format!("{prefix}{}", i + 1)).collect();
        Self::new(data, rate_hz, kind, names)
    }

    pub fn data(&self) -> &[Vec<f64>] {
        &self.data
    }

    pub fn channel(&self, i: usize) -> &[f64] {
        &self.data[i]
    }

    pub fn rate_hz(&self) -> f64 {
        self.rate_hz
    }

    pub fn kind(&self) -> SignalKind {
        self.kind
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn channels(&self) -> usize {
        self.data.len()
    }

    pub fn samples(&self) -> usize {
        self.data.first().map_or(0, Vec::len)
    }

    pub fn duration_s(&self) -> f64 {
        self.samples() as f64 / self.rate_hz
    }

    /// Same metadata, new sample rows.
    fn with_data(&self, data: Vec<Vec<f64>>, rate_hz: f64) -> Self {
        Self {
            data,
            rate_hz,
            kind: self.kind,
            channel_names: self.channel_names.clone(),
        }
    }
}

/// Subtracts the cross-channel mean from every sample.
pub fn common_average_reference(block: &TimeSeriesBlock) -> Result<TimeSeriesBlock> {
    if block.kind != SignalKind::Eeg {
        return Err(SignalError::WrongKind {
            expected: SignalKind::Eeg,
            got: block.kind,
        });
    }
    let c = block.channels();
    if c < 2 {
        return Err(SignalError::TooFewChannels(c));
    }
    let n = block.samples();
    let mut mean = vec![0.0; n];
    for row in &block.data {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= c as f64);
    let data = block
        .data
        .iter()
        .map(|row| row.iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();
    Ok(block.with_data(data, block.rate_hz))
}

/// Keeps every `factor`-th sample. The caller is responsible for band-limiting.
pub fn decimate(block: &TimeSeriesBlock, factor: i64) -> Result<TimeSeriesBlock> {
    if factor < 1 {
        return Err(SignalError::InvalidFactor(factor));
    }
    let factor = factor as usize;
    let samples = block.samples();
    if samples / factor == 0 {
        return Err(SignalError::EmptyOutput { samples, factor });
    }
    let keep = samples / factor;
    let data = block
        .data
        .iter()
        .map(|row| (0..keep).map(|i| row[i * factor]).collect())
        .collect();
    Ok(block.with_data(data, block.rate_hz / factor as f64))
}
