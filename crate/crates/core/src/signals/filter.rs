use std::f64::consts::PI;

use nalgebra::Complex;
use serde::{Deserialize, Serialize};

use super::{Result, SignalError, TimeSeriesBlock};

/// One second-order section, normalized so that `a[0] == 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    /// Coefficients as the (b0, b1, b2, a0, a1, a2) row used by SOS matrices.
    pub fn as_row(&self) -> [f64; 6] {
        [self.b[0], self.b[1], self.b[2], self.a[0], self.a[1], self.a[2]]
    }

    fn response(&self, zinv: Complex<f64>) -> Complex<f64> {
        let num = self.b[0] + zinv * (self.b[1] + zinv * self.b[2]);
        let den = self.a[0] + zinv * (self.a[1] + zinv * self.a[2]);
        num / den
    }

    /// Poles of the section (roots of z² + a1·z + a2).
    pub fn poles(&self) -> Vec<Complex<f64>> {
        let (a1, a2) = (self.a[1], self.a[2]);
        if a2 == 0.0 {
            return if a1 == 0.0 { vec![] } else { vec![Complex::new(-a1, 0.0)] };
        }
        let disc = Complex::new(a1 * a1 - 4.0 * a2, 0.0).sqrt();
        vec![(-a1 + disc) / 2.0, (-a1 - disc) / 2.0]
    }

    /// Steady-state transposed direct-form II state for a unit step input.
    fn step_state(&self) -> [f64; 2] {
        let g = self.b.iter().sum::<f64>() / self.a.iter().sum::<f64>();
        let z1 = self.b[2] - self.a[2] * g;
        let z0 = self.b[1] - self.a[1] * g + z1;
        [z0, z1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum FilterBand {
    Bandpass { low_hz: f64, high_hz: f64 },
    Lowpass { cutoff_hz: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterDesign {
    pub family: String,
    pub order: usize,
    pub band: FilterBand,
    pub rate_hz: f64,
}

/// A cascade of second-order sections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SosFilter {
    sections: Vec<Biquad>,
    design: FilterDesign,
}

impl SosFilter {
    pub fn sections(&self) -> &[Biquad] {
        &self.sections
    }

    pub fn design(&self) -> &FilterDesign {
        &self.design
    }

    pub fn poles(&self) -> Vec<Complex<f64>> {
        self.sections.iter().flat_map(Biquad::poles).collect()
    }

    pub fn is_stable(&self) -> bool {
        self.poles().iter().all(|p| p.norm() < 1.0)
    }

    /// Complex response at `freq_hz`.
    pub fn response(&self, freq_hz: f64) -> Complex<f64> {
        let w = 2.0 * PI * freq_hz / self.design.rate_hz;
        let zinv = Complex::new(0.0, -w).exp();
        self.sections
            .iter()
            .fold(Complex::new(1.0, 0.0), |acc, s| acc * s.response(zinv))
    }

    pub fn magnitude_db(&self, freq_hz: f64) -> f64 {
        20.0 * self.response(freq_hz).norm().log10()
    }

    /// Decay time constant of the slowest pole, in samples.
    pub fn time_constant_samples(&self) -> f64 {
        let r = self.poles().iter().map(|p| p.norm()).fold(0.0, f64::max);
        -1.0 / r.ln()
    }

    /// Mirror-extension length used by [`filtfilt`] at each end of an input of
    /// `n` samples: three slowest-pole time constants, at least
    /// `3 · (2 · sections + 1)` samples, and never more than `n − 1`.
    pub fn pad_len(&self, n: usize) -> usize {
        let base = 3 * (2 * self.sections.len() + 1);
        let ringing = (3.0 * self.time_constant_samples()).ceil();
        let want = if ringing.is_finite() { base.max(ringing as usize) } else { base };
        want.min(n.saturating_sub(1))
    }

    /// Shortest input accepted by zero-phase filtering.
    pub fn min_input_len(&self) -> usize {
        3 * (2 * self.sections.len() + 1) + 1
    }

    fn dc_gain(&self) -> f64 {
        self.sections
            .iter()
            .map(|s| s.b.iter().sum::<f64>() / s.a.iter().sum::<f64>())
            .product()
    }

    /// Causal single-pass filtering from rest.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.run(x, &vec![[0.0; 2]; self.sections.len()])
    }

    /// Causal filtering with an initial state per section.
    fn run(&self, x: &[f64], init: &[[f64; 2]]) -> Vec<f64> {
        let mut y = x.to_vec();
        for (s, z) in self.sections.iter().zip(init) {
            let [mut z0, mut z1] = *z;
            let ([b0, b1, b2], [_, a1, a2]) = (s.b, s.a);
            for v in y.iter_mut() {
                let xin = *v;
                let out = b0 * xin + z0;
                z0 = b1 * xin - a1 * out + z1;
                z1 = b2 * xin - a2 * out;
                *v = out;
            }
        }
        y
    }

    /// Per-section states that make the cascade start in steady state for a
    /// constant unit input.
    fn step_states(&self) -> Vec<[f64; 2]> {
        let mut scale = 1.0;
        self.sections
            .iter()
            .map(|s| {
                let [z0, z1] = s.step_state();
                let st = [z0 * scale, z1 * scale];
                scale *= s.b.iter().sum::<f64>() / s.a.iter().sum::<f64>();
                st
            })
            .collect()
    }
}

fn validate_edges(low_hz: f64, high_hz: f64, rate_hz: f64) -> Result<()> {
    let nyquist = rate_hz / 2.0;
    if !(rate_hz > 0.0) {
        return Err(SignalError::InvalidBand(format!("sampling rate {rate_hz} Hz")));
    }
    if !(low_hz > 0.0) {
        return Err(SignalError::InvalidBand(format!("low edge {low_hz} Hz must be positive")));
    }
    if low_hz >= high_hz {
        return Err(SignalError::InvalidBand(format!(
            "low edge {low_hz} Hz must be below high edge {high_hz} Hz"
        )));
    }
    if high_hz >= nyquist {
        return Err(SignalError::InvalidBand(format!(
            "high edge {high_hz} Hz must be below Nyquist {nyquist} Hz"
        )));
    }
    Ok(())
}

/// Analog Butterworth low-pass prototype poles (unit cutoff).
fn prototype_poles(order: usize) -> Vec<Complex<f64>> {
    (0..order)
        .map(|k| {
            let theta = PI * (2 * k + order + 1) as f64 / (2 * order) as f64;
            Complex::new(theta.cos(), theta.sin())
        })
        .collect()
}

fn bilinear(s: Complex<f64>, fs2: f64) -> Complex<f64> {
    (fs2 + s) / (fs2 - s)
}

/// Groups conjugate pairs (and leftover real poles) into denominator sections.
fn pole_sections(mut poles: Vec<Complex<f64>>) -> Vec<[f64; 3]> {
    const IMAG_TOL: f64 = 1e-12;
    let mut upper: Vec<Complex<f64>> = poles
        .iter()
        .copied()
        .filter(|p| p.im > IMAG_TOL * p.norm().max(1.0))
        .collect();
    poles.retain(|p| p.im.abs() <= IMAG_TOL * p.norm().max(1.0));
    // sort for a deterministic section order: slowest (closest to unit circle) last
    upper.sort_by(|a, b| a.norm().total_cmp(&b.norm()));
    poles.sort_by(|a, b| a.re.total_cmp(&b.re));
    let mut out: Vec<[f64; 3]> = upper
        .iter()
        .map(|p| [1.0, -2.0 * p.re, p.norm_sqr()])
        .collect();
    for pair in poles.chunks(2) {
        match pair {
            [p, q] => out.push([1.0, -(p.re + q.re), p.re * q.re]),
            [p] => out.push([1.0, -p.re, 0.0]),
            _ => unreachable!(),
        }
    }
    out
}

fn normalize_gain(sections: &mut [Biquad], response: Complex<f64>) {
    let gain = 1.0 / response.norm();
    let per = gain.powf(1.0 / sections.len() as f64);
    for s in sections.iter_mut() {
        s.b.iter_mut().for_each(|b| *b *= per);
    }
}

/// Butterworth band-pass of prototype order `order` (2·order poles) in SOS form.
///
/// Band edges are pre-warped so that the bilinear design has its −3 dB points
/// at `low_hz` and `high_hz`. Passband gain is normalized to 1 at the
/// geometric centre frequency.
pub fn design_bandpass(low_hz: f64, high_hz: f64, order: usize, rate_hz: f64) -> Result<SosFilter> {
    if order == 0 {
        return Err(SignalError::InvalidOrder);
    }
    validate_edges(low_hz, high_hz, rate_hz)?;
    let fs2 = 2.0 * rate_hz;
    let w1 = fs2 * (PI * low_hz / rate_hz).tan();
    let w2 = fs2 * (PI * high_hz / rate_hz).tan();
    let bw = w2 - w1;
    let w0sq = w1 * w2;

    let mut digital = Vec::with_capacity(2 * order);
    for p in prototype_poles(order) {
        let t = p * (bw / 2.0);
        let r = (t * t - w0sq).sqrt();
        digital.push(bilinear(t + r, fs2));
        digital.push(bilinear(t - r, fs2));
    }
    // each section carries one zero at z = 1 (DC) and one at z = -1 (Nyquist)
    let mut sections: Vec<Biquad> = pole_sections(digital)
        .into_iter()
        .map(|a| Biquad { b: [1.0, 0.0, -1.0], a })
        .collect();

    let center = Complex::new(0.0, -2.0 * (w0sq.sqrt() / fs2).atan()).exp();
    let h = sections
        .iter()
        .fold(Complex::new(1.0, 0.0), |acc, s| acc * s.response(center));
    normalize_gain(&mut sections, h);

    Ok(SosFilter {
        sections,
        design: FilterDesign {
            family: "butterworth".into(),
            order,
            band: FilterBand::Bandpass { low_hz, high_hz },
            rate_hz,
        },
    })
}

/// Butterworth low-pass in SOS form, unit gain at DC.
pub fn design_lowpass(cutoff_hz: f64, order: usize, rate_hz: f64) -> Result<SosFilter> {
    if order == 0 {
        return Err(SignalError::InvalidOrder);
    }
    if !(cutoff_hz > 0.0 && cutoff_hz < rate_hz / 2.0) {
        return Err(SignalError::InvalidBand(format!(
            "cutoff {cutoff_hz} Hz must lie in (0, {}) Hz",
            rate_hz / 2.0
        )));
    }
    let fs2 = 2.0 * rate_hz;
    let wc = fs2 * (PI * cutoff_hz / rate_hz).tan();
    let digital = prototype_poles(order)
        .into_iter()
        .map(|p| bilinear(p * wc, fs2))
        .collect();
    let mut sections: Vec<Biquad> = pole_sections(digital)
        .into_iter()
        .map(|a| {
            // zeros at z = -1
            let b = if a[2] == 0.0 { [1.0, 1.0, 0.0] } else { [1.0, 2.0, 1.0] };
            Biquad { b, a }
        })
        .collect();
    let dc = Complex::new(1.0, 0.0);
    let h = sections
        .iter()
        .fold(Complex::new(1.0, 0.0), |acc, s| acc * s.response(dc));
    normalize_gain(&mut sections, h);
    Ok(SosFilter {
        sections,
        design: FilterDesign {
            family: "butterworth".into(),
            order,
            band: FilterBand::Lowpass { cutoff_hz },
            rate_hz,
        },
    })
}

/// Zero-phase filtering of one sequence: forward pass, then a pass over the
/// time-reversed output.
///
/// Both ends are mirrored (even extension, which adds no step at the edges)
/// and each pass starts in the steady state of a constant input. For filters that pass DC that constant is the first sample;
/// for DC-blocking filters it is the mean of the sequence, which avoids a slow
/// step transient when the first sample is not representative of the level.
pub fn filtfilt(filter: &SosFilter, x: &[f64]) -> Result<Vec<f64>> {
    let min = filter.min_input_len();
    if x.len() < min {
        return Err(SignalError::TooShort { len: x.len(), min });
    }
    let n = x.len();
    let pad = filter.pad_len(n);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| x[n - 1 - i]));

    let blocks_dc = filter.dc_gain().abs() < 1e-12;
    let level = |s: &[f64]| {
        if blocks_dc {
            s.iter().sum::<f64>() / s.len() as f64
        } else {
            s[0]
        }
    };
    let zi = filter.step_states();
    let scaled = |v: f64| zi.iter().map(|z| [z[0] * v, z[1] * v]).collect::<Vec<_>>();
    let mut y = filter.run(&ext, &scaled(level(&ext)));
    y.reverse();
    let mut y = filter.run(&y, &scaled(level(&y)));
    y.reverse();
    Ok(y[pad..pad + n].to_vec())
}

/// Applies [`filtfilt`] to every channel of a block.
pub fn filter_forward_backward(block: &TimeSeriesBlock, filter: &SosFilter) -> Result<TimeSeriesBlock> {
    let data = block
        .data()
        .iter()
        .map(|row| filtfilt(filter, row))
        .collect::<Result<Vec<_>>>()?;
    Ok(block.with_data(data, block.rate_hz()))
}
