//! Synthetic grasp-and-lift trials.
//!
//! Kinematics follow minimum-jerk segments through reach, grasp and lift,
//! hold, put-down and return. A subset of EEG channels is a fixed linear mix of
//! the fingertip displacements and velocities `lead_s` ahead of time; EMG is a
//! tonal carrier whose envelope tracks posture, grip force and hand speed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::data::{TrialBundle, TrialEvents};
use super::{Result, TrainError};
use crate::copilot::MotionState;
use crate::signals::{SignalKind, TimeSeriesBlock};

pub const EEG_CHANNELS: usize = 32;
pub const EMG_CHANNELS: usize = 5;
pub const KIN_NAMES: [&str; 6] = ["index_x", "index_y", "index_z", "thumb_x", "thumb_y", "thumb_z"];

const SOURCES: usize = 12;
const GRIP_FORCE_N: f64 = 2.0;
const TRIAL_END_S: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTrialSpec {
    pub duration_s: f64,
    pub rate_eeg: f64,
    pub rate_emg: f64,
    /// Starts of LIFTING, HOLDING, PUTTING and RETURNING; SEARCHING starts at 0.
    pub phase_bounds_s: [f64; 4],
    /// Uniform per-trial jitter applied to each phase boundary.
    pub timing_jitter_s: f64,
    pub eeg_noise: f64,
    pub emg_noise: f64,
    pub eeg_coupling: f64,
    pub emg_coupling: f64,
    /// EEG channels that carry kinematic information.
    pub informative_channels: usize,
    /// How far EEG activity leads the movement.
    pub lead_s: f64,
    pub emg_lead_s: f64,
    /// Range of the per-muscle carrier frequencies that the envelopes modulate.
    pub emg_carrier_hz: [f64; 2],
    /// Seeds the subject-level mixing matrices, shared by all trials.
    pub subject_seed: u64,
}

impl Default for SyntheticTrialSpec {
    fn default() -> Self {
        Self {
            duration_s: 4.0,
            rate_eeg: 500.0,
            rate_emg: 4000.0,
            phase_bounds_s: [1.0, 1.8, 2.4, 3.2],
            timing_jitter_s: 0.08,
            eeg_noise: 1.0,
            emg_noise: 0.1,
            eeg_coupling: 1.0,
            emg_coupling: 1.0,
            informative_channels: 12,
            lead_s: 0.2,
            emg_lead_s: 0.05,
            emg_carrier_hz: [30.0, 50.0],
            subject_seed: 0,
        }
    }
}

impl SyntheticTrialSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(TrainError::Spec(m));
        if !(self.duration_s > 0.0 && self.rate_eeg > 0.0 && self.rate_emg > 0.0) {
            return err("duration and rates must be positive".into());
        }
        let ratio = self.rate_emg / self.rate_eeg;
        if (ratio - ratio.round()).abs() > 1e-9 || ratio < 1.0 {
            return err(format!("EMG rate {} is not a multiple of EEG rate {}", self.rate_emg, self.rate_eeg));
        }
        let b = self.phase_bounds_s;
        if !(b[0] > 0.0 && b.windows(2).all(|w| w[1] > w[0]) && b[3] < self.duration_s) {
            return err(format!("phase bounds {b:?} must increase strictly inside (0, {})", self.duration_s));
        }
        let gap = b
            .windows(2)
            .map(|w| w[1] - w[0])
            .chain([b[0], self.duration_s - b[3]])
            .fold(f64::INFINITY, f64::min);
        if !(self.timing_jitter_s >= 0.0 && 2.0 * self.timing_jitter_s < gap) {
            return err(format!("timing jitter {} too large for phases as short as {gap} s", self.timing_jitter_s));
        }
        for (name, v) in [
            ("eeg_noise", self.eeg_noise),
            ("emg_noise", self.emg_noise),
            ("eeg_coupling", self.eeg_coupling),
            ("emg_coupling", self.emg_coupling),
            ("lead_s", self.lead_s),
            ("emg_lead_s", self.emg_lead_s),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return err(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if self.informative_channels == 0 || self.informative_channels > EEG_CHANNELS {
            return err(format!("informative_channels must lie in 1..={EEG_CHANNELS}"));
        }
        Ok(())
    }

    pub fn eeg_samples(&self) -> usize {
        (self.duration_s * self.rate_eeg).round() as usize
    }

    pub fn emg_samples(&self) -> usize {
        self.eeg_samples() * (self.rate_emg / self.rate_eeg).round() as usize
    }
}

/// Subject-level coupling: which combination of kinematic sources each EEG
/// channel sees, and how each muscle weights the envelope features.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectMixing {
    /// `informative × 12`
    pub eeg: Vec<Vec<f64>>,
    /// `5 × 6`
    pub emg: Vec<Vec<f64>>,
}

impl SubjectMixing {
    pub fn new(spec: &SyntheticTrialSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.subject_seed ^ 0x6d69_7869_6e67);
        let scale = 1.0 / (SOURCES as f64).sqrt();
        let eeg = (0..spec.informative_channels)
            .map(|_| (0..SOURCES).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let emg = (0..EMG_CHANNELS)
            .map(|m| {
                (0..ENVELOPE_FEATURES)
                    .map(|k| match k {
                        _ if k == m => 1.0,
                        LATERAL => rng.gen_range(0.5..1.0),
                        _ => rng.gen_range(0.0..0.3),
                    })
                    .collect()
            })
            .collect();
        Self { eeg, emg }
    }
}

fn min_jerk(s: f64) -> f64 {
    let s = s.clamp(0.0, 1.0);
    s * s * s * (10.0 - 15.0 * s + 6.0 * s * s)
}

fn progress(t: f64, start: f64, end: f64) -> f64 {
    min_jerk((t - start) / (end - start))
}

/// Per-trial geometry and timing.
struct Plan {
    bounds: [f64; 4],
    duration: f64,
    home: [f64; 3],
    grasp: [f64; 3],
    lift: f64,
}

#[derive(Clone, Copy)]
struct HandState {
    centre: [f64; 3],
    aperture: f64,
    force: f64,
    height: f64,
}

const HOME_APERTURE: f64 = 0.02;
const GRASP_APERTURE: f64 = 0.018;
const RELEASE_APERTURE: f64 = 0.03;

impl Plan {
    fn state(&self, t: f64) -> HandState {
        let [b1, b2, b3, b4] = self.bounds;
        let grasped = b1 + 0.3 * (b2 - b1);
        let lowered = b3 + 0.75 * (b4 - b3);
        let home_by = b4 + 0.8 * (self.duration - b4);
        let lerp = |a: [f64; 3], b: [f64; 3], s: f64| [a[0] + (b[0] - a[0]) * s, a[1] + (b[1] - a[1]) * s, a[2] + (b[2] - a[2]) * s];
        let mut centre = self.grasp;
        let (mut aperture, mut force, mut height) = (GRASP_APERTURE, 0.0, 0.0);
        if t < b1 {
            let s = progress(t, 0.0, b1);
            centre = lerp(self.home, self.grasp, s);
            aperture = HOME_APERTURE + (GRASP_APERTURE - HOME_APERTURE) * s + 0.035 * (std::f64::consts::PI * s).sin();
        } else if t < b2 {
            force = GRIP_FORCE_N * progress(t, b1, grasped);
            height = self.lift * progress(t, grasped, b2);
        } else if t < b3 {
            force = GRIP_FORCE_N;
            height = self.lift;
        } else if t < b4 {
            height = self.lift * (1.0 - progress(t, b3, lowered));
            let r = progress(t, lowered, b4);
            force = GRIP_FORCE_N * (1.0 - r);
            aperture = GRASP_APERTURE + (RELEASE_APERTURE - GRASP_APERTURE) * r;
        } else {
            let s = progress(t, b4, home_by);
            centre = lerp(self.grasp, self.home, s);
            aperture = RELEASE_APERTURE + (HOME_APERTURE - RELEASE_APERTURE) * s;
        }
        centre[2] += height;
        HandState {
            centre,
            aperture,
            force,
            height,
        }
    }

    fn fingertips(&self, t: f64) -> [f64; 6] {
        let s = self.state(t);
        let c = s.centre;
        [
            c[0] + 0.005,
            c[1] + s.aperture,
            c[2] + 0.01,
            c[0] - 0.005,
            c[1] - s.aperture,
            c[2] - 0.01,
        ]
    }

    fn label(&self, t: f64) -> MotionState {
        let i = self.bounds.iter().filter(|&&b| t >= b).count();
        MotionState::REAL[i]
    }
}

const DT: f64 = 1e-3;

/// Displacements (per 10 cm) and velocities (m/s) of both fingertips.
fn sources(plan: &Plan, home_tips: &[f64; 6], t: f64) -> [f64; SOURCES] {
    let p = plan.fingertips(t);
    let (a, b) = (plan.fingertips(t - DT), plan.fingertips(t + DT));
    let mut u = [0.0; SOURCES];
    for d in 0..6 {
        u[d] = (p[d] - home_tips[d]) / 0.1;
        u[6 + d] = (b[d] - a[d]) / (2.0 * DT);
    }
    u
}

const ENVELOPE_FEATURES: usize = 6;
const LATERAL: usize = 5;

/// Non-negative envelope features: reach extension, object height, grip
/// force, aperture, hand speed and lateral hand offset.
fn envelope_features(plan: &Plan, t: f64) -> [f64; ENVELOPE_FEATURES] {
    let s = plan.state(t);
    let (a, b) = (plan.state(t - DT).centre, plan.state(t + DT).centre);
    let speed = (0..3).map(|i| ((b[i] - a[i]) / (2.0 * DT)).powi(2)).sum::<f64>().sqrt();
    let reach = (s.centre[0] - plan.home[0]) / (plan.grasp[0] - plan.home[0]);
    [
        reach.max(0.0),
        s.height / 0.1,
        s.force / GRIP_FORCE_N,
        ((s.aperture - 0.015) / 0.04).max(0.0),
        speed / 0.5,
        ((s.centre[1] - plan.home[1]) / 0.1 + 0.5).max(0.0),
    ]
}

fn trial_plan(spec: &SyntheticTrialSpec, rng: &mut ChaCha8Rng) -> Plan {
    let mut bounds = spec.phase_bounds_s;
    for b in bounds.iter_mut() {
        if spec.timing_jitter_s > 0.0 {
            *b += rng.gen_range(-spec.timing_jitter_s..spec.timing_jitter_s);
        }
    }
    let home = [0.05, 0.01, 0.06];
    let grasp = [0.30 + rng.gen_range(-0.03..0.03), rng.gen_range(-0.03..0.03), 0.03];
    Plan {
        bounds,
        duration: spec.duration_s,
        home,
        grasp,
        lift: 0.10 + rng.gen_range(-0.02..0.02),
    }
}

/// Clean and noise parts of both modalities, kept apart for SNR bookkeeping.
struct Parts {
    eeg_signal: Vec<Vec<f64>>,
    eeg_noise: Vec<Vec<f64>>,
    emg_signal: Vec<Vec<f64>>,
    emg_noise: Vec<Vec<f64>>,
}

fn generate_parts(spec: &SyntheticTrialSpec, seed: u64) -> Result<(Plan, Parts)> {
    spec.validate()?;
    let mixing = SubjectMixing::new(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plan = trial_plan(spec, &mut rng);
    let n = spec.eeg_samples();
    let m = spec.emg_samples();
    let home_tips = plan.fingertips(-1.0);
    let time = |i: usize| i as f64 / spec.rate_eeg;
    let tau = std::f64::consts::TAU;

    let mut eeg_signal = vec![vec![0.0; n]; EEG_CHANNELS];
    for i in 0..n {
        let u = sources(&plan, &home_tips, time(i) + spec.lead_s);
        for (ch, w) in mixing.eeg.iter().enumerate() {
            eeg_signal[ch][i] = spec.eeg_coupling * w.iter().zip(&u).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    // Noise is always drawn so the random stream does not depend on its level.
    let common: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let eeg_noise = (0..EEG_CHANNELS)
        .map(|_| {
            let freq = rng.gen_range(8.5..11.5);
            let phase = rng.gen_range(0.0..tau);
            (0..n)
                .map(|i| {
                    let white: f64 = rng.sample(StandardNormal);
                    let alpha = (tau * freq * time(i) + phase).sin();
                    spec.eeg_noise * (0.8 * white + 0.6 * alpha + 0.5 * common[i])
                })
                .collect()
        })
        .collect();

    let mut emg_signal: Vec<Vec<f64>> = (0..EMG_CHANNELS)
        .map(|_| {
            let freq = rng.gen_range(spec.emg_carrier_hz[0]..spec.emg_carrier_hz[1]);
            let phase = rng.gen_range(0.0..tau);
            (0..m)
                .map(|j| std::f64::consts::SQRT_2 * (tau * freq * j as f64 / spec.rate_emg + phase).sin())
                .collect()
        })
        .collect();
    for j in 0..m {
        let f = envelope_features(&plan, j as f64 / spec.rate_emg + spec.emg_lead_s);
        for (row, g) in emg_signal.iter_mut().zip(&mixing.emg) {
            row[j] *= 0.1 + spec.emg_coupling * g.iter().zip(&f).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    let emg_noise = (0..EMG_CHANNELS)
        .map(|_| (0..m).map(|_| spec.emg_noise * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();

    Ok((
        plan,
        Parts {
            eeg_signal,
            eeg_noise,
            emg_signal,
            emg_noise,
        },
    ))
}

fn add(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    a.into_iter()
        .zip(b)
        .map(|(x, y)| x.into_iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

/// Generates one trial. `seed` selects the trial; `spec.subject_seed` fixes
/// the coupling shared across trials.
pub fn generate_synthetic_trial(spec: &SyntheticTrialSpec, seed: u64) -> Result<TrialBundle> {
    let (plan, parts) = generate_parts(spec, seed)?;
    let n = spec.eeg_samples();
    let time = |i: usize| i as f64 / spec.rate_eeg;

    let kin: Vec<Vec<f64>> = {
        let tips: Vec<[f64; 6]> = (0..n).map(|i| plan.fingertips(time(i))).collect();
        (0..6).map(|d| tips.iter().map(|p| p[d]).collect()).collect()
    };
    let labels = (0..n).map(|i| plan.label(time(i))).collect();
    let events = {
        let states: Vec<HandState> = (0..n).map(|i| plan.state(time(i))).collect();
        let object_vz = (0..n)
            .map(|i| {
                let t = time(i);
                (plan.state(t + DT).height - plan.state(t - DT).height) / (2.0 * DT)
            })
            .collect();
        TrialEvents {
            contact_force: states.iter().map(|s| s.force).collect(),
            object_height: states.iter().map(|s| s.height).collect(),
            object_vz,
            trial_end: (0..n)
                .map(|i| if time(i) >= spec.duration_s - TRIAL_END_S { 1.0 } else { 0.0 })
                .collect(),
        }
    };

    let names = |prefix: &str, c: usize| (1..=c).map(|i| format!("{prefix}{i}")).collect::<Vec<_>>();
    let eeg = add(parts.eeg_signal, parts.eeg_noise);
    let emg = add(parts.emg_signal, parts.emg_noise);
    Ok(TrialBundle {
        id: format!("{seed:06}"),
        eeg: TimeSeriesBlock::new(eeg, spec.rate_eeg, SignalKind::Eeg, names("eeg", EEG_CHANNELS))?,
        emg: TimeSeriesBlock::new(emg, spec.rate_emg, SignalKind::Emg, names("emg", EMG_CHANNELS))?,
        kin: TimeSeriesBlock::new(kin, spec.rate_eeg, SignalKind::Kin, KIN_NAMES.iter().map(|s| s.to_string()).collect())?,
        labels: Some(labels),
        events: Some(events),
    })
}

/// Raw-signal SNR in dB: EEG over the informative channels, EMG over all
/// muscles.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnrReport {
    pub eeg_db: f64,
    pub emg_db: f64,
}

fn power(rows: &[Vec<f64>]) -> f64 {
    let n: usize = rows.iter().map(Vec::len).sum();
    rows.iter().flatten().map(|v| v * v).sum::<f64>() / n as f64
}

/// Signal-to-noise ratios of one generated trial.
pub fn trial_snr(spec: &SyntheticTrialSpec, seed: u64) -> Result<SnrReport> {
    let (_, p) = generate_parts(spec, seed)?;
    let k = spec.informative_channels;
    let db = |s: f64, n: f64| 10.0 * (s / n).log10();
    Ok(SnrReport {
        eeg_db: db(power(&p.eeg_signal[..k]), power(&p.eeg_noise[..k])),
        emg_db: db(power(&p.emg_signal), power(&p.emg_noise)),
    })
}

/// A dataset of `trials` trials with trial seeds derived from `seed`.
pub fn generate_dataset(spec: &SyntheticTrialSpec, trials: usize, seed: u64) -> Result<Vec<TrialBundle>> {
    (0..trials)
        .map(|i| {
            let mut t = generate_synthetic_trial(spec, seed.wrapping_mul(1_000_003).wrapping_add(i as u64))?;
            t.id = format!("{:03}", i + 1);
            Ok(t)
        })
        .collect()
}
