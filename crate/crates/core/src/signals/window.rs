use serde::{Deserialize, Serialize};

use super::{Result, SignalError, TimeSeriesBlock};

/// Window length, hop and input-to-target delay for slicing a trial.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    pub window_samples: usize,
    pub step_samples: usize,
    pub delay_ms: u32,
    pub rate_hz: f64,
}

impl WindowSpec {
    /// Window lengths explored by the decoding sweeps.
    pub const WINDOW_RANGE: std::ops::RangeInclusive<usize> = 50..=1000;

    pub fn new(window_samples: usize, step_samples: usize, delay_ms: u32, rate_hz: f64) -> Result<Self> {
        let spec = Self {
            window_samples,
            step_samples,
            delay_ms,
            rate_hz,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Spec with the default hop of one fifth of the window.
    pub fn with_default_step(window_samples: usize, delay_ms: u32, rate_hz: f64) -> Result<Self> {
        Self::new(window_samples, (window_samples / 5).max(1), delay_ms, rate_hz)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_samples == 0 {
            return Err(SignalError::InvalidWindow("window must be at least one sample".into()));
        }
        if self.step_samples == 0 || self.step_samples > self.window_samples {
            return Err(SignalError::InvalidWindow(format!(
                "step {} must lie in [1, window {}]",
                self.step_samples, self.window_samples
            )));
        }
        if !(self.rate_hz > 0.0) {
            return Err(SignalError::InvalidWindow(format!("rate {} Hz", self.rate_hz)));
        }
        Ok(())
    }

    /// Additionally requires the window to lie in [`Self::WINDOW_RANGE`].
    pub fn validate_range(&self) -> Result<()> {
        self.validate()?;
        if !Self::WINDOW_RANGE.contains(&self.window_samples) {
            return Err(SignalError::InvalidWindow(format!(
                "window {} outside {:?}",
                self.window_samples,
                Self::WINDOW_RANGE
            )));
        }
        Ok(())
    }

    pub fn delay_samples(&self) -> usize {
        (self.delay_ms as f64 * self.rate_hz / 1000.0).round() as usize
    }
}

/// `(window end index, target index)` pairs for a trial of `samples` samples.
///
/// The window ending at `t` covers `t − window + 1 ..= t`; its target is the
/// sample at `t + delay`. Windows whose target falls past the trial end are
/// dropped.
pub fn window_targets(samples: usize, spec: &WindowSpec) -> Vec<(usize, usize)> {
    let delay = spec.delay_samples();
    let first = spec.window_samples - 1;
    let mut out = Vec::new();
    let mut t = first;
    while t + delay < samples {
        out.push((t, t + delay));
        t += spec.step_samples;
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowPair {
    /// channels × window_samples
    pub input: Vec<Vec<f64>>,
    pub target: Vec<f64>,
    pub end_index: usize,
    pub target_index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SliceStatus {
    Ok,
    WindowExceedsTrial,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowSlices {
    pub pairs: Vec<WindowPair>,
    pub status: SliceStatus,
}

pub fn slice_windows(x: &TimeSeriesBlock, y: &TimeSeriesBlock, spec: &WindowSpec) -> Result<WindowSlices> {
    spec.validate()?;
    if x.rate_hz() != y.rate_hz() || x.rate_hz() != spec.rate_hz {
        return Err(SignalError::InvalidWindow(format!(
            "rates differ: input {} Hz, target {} Hz, spec {} Hz",
            x.rate_hz(),
            y.rate_hz(),
            spec.rate_hz
        )));
    }
    if y.channels() != 6 {
        return Err(SignalError::DimensionMismatch {
            expected: 6,
            got: y.channels(),
        });
    }
    let samples = x.samples().min(y.samples());
    if spec.window_samples > samples {
        log::warn!(
            "window of {} samples exceeds trial of {samples} samples; no pairs emitted",
            spec.window_samples
        );
        return Ok(WindowSlices {
            pairs: Vec::new(),
            status: SliceStatus::WindowExceedsTrial,
        });
    }
    let pairs = window_targets(samples, spec)
        .into_iter()
        .map(|(end, target)| WindowPair {
            input: x
                .data()
                .iter()
                .map(|row| row[end + 1 - spec.window_samples..=end].to_vec())
                .collect(),
            target: y.data().iter().map(|row| row[target]).collect(),
            end_index: end,
            target_index: target,
        })
        .collect();
    Ok(WindowSlices {
        pairs,
        status: SliceStatus::Ok,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signals::SignalKind;
    use proptest::prelude::*;

    fn blocks(n: usize) -> (TimeSeriesBlock, TimeSeriesBlock) {
        let x = TimeSeriesBlock::with_default_names(
            vec![(0..n).map(|i| i as f64).collect(); 2],
            500.0,
            SignalKind::Eeg,
        )
        .unwrap();
        let y = TimeSeriesBlock::with_default_names(
            vec![(0..n).map(|i| -(i as f64)).collect(); 6],
            500.0,
            SignalKind::Kin,
        )
        .unwrap();
        (x, y)
    }

    #[test]
    fn delay_rounding() {
        let spec = WindowSpec::new(250, 50, 200, 500.0).unwrap();
        assert_eq!(spec.delay_samples(), 100);
        let spec = WindowSpec::new(250, 50, 3, 500.0).unwrap();
        assert_eq!(spec.delay_samples(), 2);
    }

    #[test]
    fn slice_example_counts() {
        let (x, y) = blocks(1000);
        let spec = WindowSpec::new(250, 50, 200, 500.0).unwrap();
        let s = slice_windows(&x, &y, &spec).unwrap();
        assert_eq!(s.pairs.len(), 14);
        let targets: Vec<usize> = s.pairs.iter().map(|p| p.target_index).collect();
        assert_eq!(targets.first(), Some(&349));
        assert_eq!(targets.get(1), Some(&399));
        assert_eq!(targets.last(), Some(&999));
        let p = &s.pairs[0];
        assert_eq!(p.input[0].len(), 250);
        assert_eq!(p.input[0][0], 0.0);
        assert_eq!(p.input[0][249], 249.0);
        assert_eq!(p.target, vec![-349.0; 6]);
    }

    #[test]
    fn degenerate_specs() {
        let (x, y) = blocks(37);
        let spec = WindowSpec::new(1, 1, 0, 500.0).unwrap();
        assert_eq!(slice_windows(&x, &y, &spec).unwrap().pairs.len(), 37);

        let (x, y) = blocks(1000);
        let spec = WindowSpec::new(1001, 200, 200, 500.0).unwrap();
        let s = slice_windows(&x, &y, &spec).unwrap();
        assert!(s.pairs.is_empty());
        assert_eq!(s.status, SliceStatus::WindowExceedsTrial);
    }

    #[test]
    fn spec_validation() {
        assert!(WindowSpec::new(100, 101, 0, 500.0).is_err());
        assert!(WindowSpec::new(100, 0, 0, 500.0).is_err());
        assert!(WindowSpec::new(40, 8, 0, 500.0).unwrap().validate_range().is_err());
        assert!(WindowSpec::new(1000, 200, 0, 500.0).unwrap().validate_range().is_ok());
        assert_eq!(WindowSpec::with_default_step(250, 200, 500.0).unwrap().step_samples, 50);
    }

    proptest! {
        #[test]
        fn targets_in_bounds_and_count_closed_form(
            n in 1usize..3000, w in 1usize..600, step_frac in 1usize..100, delay_ms in 0u32..800,
        ) {
            let step = (w * step_frac / 100).max(1);
            let spec = WindowSpec::new(w, step, delay_ms, 500.0).unwrap();
            let pairs = window_targets(n, &spec);
            let d = spec.delay_samples();
            for &(end, target) in &pairs {
                prop_assert!(target < n);
                prop_assert!(end + 1 >= w);
                prop_assert_eq!(target, end + d);
            }
            let expected = if n >= d + w { (n - 1 - d - (w - 1)) / step + 1 } else { 0 };
            prop_assert_eq!(pairs.len(), expected);
        }
    }
}
