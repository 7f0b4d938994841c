use serde::{Deserialize, Serialize};

use super::{Result, SignalError, SignalKind, TimeSeriesBlock};

/// Per-dimension min-max range fitted on training kinematics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationParams {
    pub k_min: Vec<f64>,
    pub k_max: Vec<f64>,
}

impl NormalizationParams {
    pub fn dims(&self) -> usize {
        self.k_min.len()
    }

    /// Folds further training samples into the range.
    pub fn merge(&mut self, other: &NormalizationParams) -> Result<()> {
        if other.dims() != self.dims() {
            return Err(SignalError::DimensionMismatch {
                expected: self.dims(),
                got: other.dims(),
            });
        }
        for d in 0..self.dims() {
            self.k_min[d] = self.k_min[d].min(other.k_min[d]);
            self.k_max[d] = self.k_max[d].max(other.k_max[d]);
        }
        Ok(())
    }

    /// `(k − k_min) / (k_max − k_min)`; a constant dimension maps to 0.5.
    /// Values outside the fitted range are not clipped.
    pub fn normalize(&self, dim: usize, k: f64) -> f64 {
        let span = self.k_max[dim] - self.k_min[dim];
        if span == 0.0 {
            0.5
        } else {
            (k - self.k_min[dim]) / span
        }
    }

    pub fn denormalize(&self, dim: usize, v: f64) -> f64 {
        let span = self.k_max[dim] - self.k_min[dim];
        if span == 0.0 {
            self.k_min[dim]
        } else {
            self.k_min[dim] + v * span
        }
    }
}

pub fn fit_minmax(kin: &TimeSeriesBlock) -> Result<NormalizationParams> {
    if kin.kind() != SignalKind::Kin {
        return Err(SignalError::WrongKind {
            expected: SignalKind::Kin,
            got: kin.kind(),
        });
    }
    if kin.channels() == 0 || kin.samples() == 0 {
        return Err(SignalError::NoData);
    }
    let (k_min, k_max) = kin
        .data()
        .iter()
        .map(|row| {
            row.iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
        })
        .unzip();
    Ok(NormalizationParams { k_min, k_max })
}

fn check_dims(kin: &TimeSeriesBlock, p: &NormalizationParams) -> Result<()> {
    if kin.channels() != p.dims() {
        return Err(SignalError::DimensionMismatch {
            expected: p.dims(),
            got: kin.channels(),
        });
    }
    Ok(())
}

pub fn apply_minmax(kin: &TimeSeriesBlock, p: &NormalizationParams) -> Result<TimeSeriesBlock> {
    check_dims(kin, p)?;
    let data = kin
        .data()
        .iter()
        .enumerate()
        .map(|(d, row)| row.iter().map(|&v| p.normalize(d, v)).collect())
        .collect();
    Ok(kin.with_data(data, kin.rate_hz()))
}

pub fn inverse_minmax(kin: &TimeSeriesBlock, p: &NormalizationParams) -> Result<TimeSeriesBlock> {
    check_dims(kin, p)?;
    let data = kin
        .data()
        .iter()
        .enumerate()
        .map(|(d, row)| row.iter().map(|&v| p.denormalize(d, v)).collect())
        .collect();
    Ok(kin.with_data(data, kin.rate_hz()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn kin(rows: Vec<Vec<f64>>) -> TimeSeriesBlock {
        TimeSeriesBlock::with_default_names(rows, 500.0, SignalKind::Kin).unwrap()
    }

    #[test]
    fn fit_examples() {
        let p = fit_minmax(&kin(vec![vec![2.0, 4.0, 6.0], vec![5.0, 5.0, 5.0]])).unwrap();
        assert_eq!(p.k_min, vec![2.0, 5.0]);
        assert_eq!(p.k_max, vec![6.0, 5.0]);
        assert_eq!(fit_minmax(&kin(vec![vec![]])), Err(SignalError::NoData));
        assert_eq!(fit_minmax(&kin(vec![])), Err(SignalError::NoData));
    }

    #[test]
    fn apply_examples() {
        let p = NormalizationParams {
            k_min: vec![2.0, 5.0],
            k_max: vec![6.0, 5.0],
        };
        let out = apply_minmax(&kin(vec![vec![2.0, 4.0, 6.0, 8.0], vec![5.0; 4]]), &p).unwrap();
        assert_eq!(out.channel(0), &[0.0, 0.5, 1.0, 1.5]);
        assert_eq!(out.channel(1), &[0.5; 4]);
        assert!(matches!(
            apply_minmax(&kin(vec![vec![1.0]]), &p),
            Err(SignalError::DimensionMismatch { .. })
        ));
    }

    proptest! {
        #[test]
        fn inverse_undoes_apply(
            rows in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 2..40), 1..7),
        ) {
            let len = rows[0].len();
            let rows: Vec<Vec<f64>> = rows.into_iter().map(|mut r| { r.resize(len, 0.0); r }).collect();
            let block = kin(rows);
            let p = fit_minmax(&block).unwrap();
            let back = inverse_minmax(&apply_minmax(&block, &p).unwrap(), &p).unwrap();
            for (d, (a, b)) in block.data().iter().zip(back.data()).enumerate() {
                if p.k_max[d] > p.k_min[d] {
                    for (x, y) in a.iter().zip(b) {
                        prop_assert!((x - y).abs() <= 1e-9);
                    }
                }
            }
        }
    }
}
