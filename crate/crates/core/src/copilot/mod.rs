//! Post-hoc filtering of decoded points: a critic scores each point, a
//! sensor-driven state machine tracks the task phase, and per-state
//! thresholds decide which points survive.

mod critic;
mod decoded;
mod rules;
mod state;

pub use decoded::{decode_set, DecodedSet};
pub use critic::{alpha_from_errors, critic_features, local_jerk, point_error, softmax5, Critic, CriticConfig};
pub use rules::{
    attribute_point, fsm_step, Comparator, Rule, SensorFrame, ThresholdTable, TransitionRules, DEFAULT_RULES,
    SENSOR_FEATURES,
};
pub use state::MotionState;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::kinematics::{overall_pcc, KIN_DIMS};
use crate::model::ModelError;
use crate::tensor::TensorError;
use crate::train::TrainError;

#[derive(Debug, Error)]
pub enum CopilotError {
    #[error("invalid threshold table: {0}")]
    Thresholds(String),
    #[error("rule file line {line}: {msg}")]
    RuleFile { line: usize, msg: String },
    #[error("invalid rule table: {0}")]
    RuleTable(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CopilotError>;

/// A decoded point before filtering.
#[derive(Clone, Debug, PartialEq)]
pub struct PointInput {
    pub index: usize,
    pub output: [f64; KIN_DIMS],
    pub posterior: [f64; 5],
    pub confidence: f64,
    pub sensors: SensorFrame,
}

impl PointInput {
    fn validate(&self) -> Result<()> {
        let sum: f64 = self.posterior.iter().sum();
        if self.posterior.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-6 {
            return Err(CopilotError::Input(format!(
                "point {}: posterior {:?} is not a distribution",
                self.index, self.posterior
            )));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(CopilotError::Input(format!(
                "point {}: confidence {} outside [0, 1]",
                self.index, self.confidence
            )));
        }
        if self.output.iter().chain(&self.sensors).any(|v| !v.is_finite()) {
            return Err(CopilotError::Input(format!("point {}: non-finite value", self.index)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredPoint {
    pub input: PointInput,
    /// Machine state after consuming this point's sensors.
    pub machine: MotionState,
    pub effective: MotionState,
    pub threshold: f64,
    pub retained: bool,
}

/// Per-state totals keyed by effective state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FilterReport {
    pub counts: BTreeMap<MotionState, (usize, usize)>,
    pub total: usize,
    pub retained: usize,
}

impl FilterReport {
    /// `None` for an empty trajectory.
    pub fn ratio(&self) -> Option<f64> {
        (self.total > 0).then(|| self.retained as f64 / self.total as f64)
    }

    pub fn merge(&mut self, other: &FilterReport) {
        for (s, (t, r)) in &other.counts {
            let e = self.counts.entry(*s).or_default();
            e.0 += t;
            e.1 += r;
        }
        self.total += other.total;
        self.retained += other.retained;
    }

    /// `state,total,retained,ratio` for every state plus an `ALL` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("state,total,retained,ratio\n");
        for state in MotionState::REAL.iter().chain([&MotionState::Unrely]) {
            let (t, r) = self.counts.get(state).copied().unwrap_or_default();
            let _ = writeln!(s, "{state},{t},{r},{}", format_ratio(r, t));
        }
        let _ = writeln!(s, "ALL,{},{},{}", self.total, self.retained, format_ratio(self.retained, self.total));
        s
    }
}

/// Percentage with two decimals, or `undefined` when `total` is zero.
pub fn format_ratio(retained: usize, total: usize) -> String {
    if total == 0 {
        "undefined".into()
    } else {
        format!("{:.2}%", 100.0 * retained as f64 / total as f64)
    }
}

/// Runs the machine from SEARCHING over one time-ordered trajectory and keeps
/// each point iff its confidence reaches the threshold of its effective state.
pub fn filter_trajectory(
    points: &[PointInput],
    thresholds: &ThresholdTable,
    rules: &TransitionRules,
) -> Result<(Vec<ScoredPoint>, FilterReport)> {
    if let Some(w) = points.windows(2).find(|w| w[1].index <= w[0].index) {
        return Err(CopilotError::Input(format!(
            "points are not time-ordered ({} then {})",
            w[0].index, w[1].index
        )));
    }
    let mut state = MotionState::Searching;
    let mut report = FilterReport::default();
    let mut out = Vec::with_capacity(points.len());
    for p in points {
        p.validate()?;
        state = fsm_step(state, &p.posterior, &p.sensors, rules)?;
        let effective = attribute_point(state, &p.posterior);
        let threshold = thresholds.threshold(effective);
        let retained = p.confidence >= threshold;
        let e = report.counts.entry(effective).or_default();
        e.0 += 1;
        e.1 += retained as usize;
        report.total += 1;
        report.retained += retained as usize;
        out.push(ScoredPoint {
            input: p.clone(),
            machine: state,
            effective,
            threshold,
            retained,
        });
    }
    Ok((out, report))
}

/// A trajectory to filter together with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    pub points: Vec<PointInput>,
    pub truth: Vec<[f64; KIN_DIMS]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub scale: f64,
    pub total: usize,
    pub retained: usize,
    pub ratio: Option<f64>,
    /// Overall PCC of the retained points; `None` when fewer than two remain
    /// or either side is constant.
    pub pcc: Option<f64>,
}

/// Filters every track under `base.scaled(s)` for each scale and correlates
/// the pooled retained points with their ground truth.
pub fn threshold_sweep(
    tracks: &[Track],
    base: &ThresholdTable,
    rules: &TransitionRules,
    scales: &[f64],
) -> Result<Vec<SweepPoint>> {
    for t in tracks {
        if t.points.len() != t.truth.len() {
            return Err(CopilotError::Input(format!(
                "{} points but {} ground-truth rows",
                t.points.len(),
                t.truth.len()
            )));
        }
    }
    let mut curve = Vec::with_capacity(scales.len());
    for &scale in scales {
        if !(scale >= 0.0 && scale.is_finite()) {
            return Err(CopilotError::Input(format!("scale {scale} must be finite and non-negative")));
        }
        let table = base.scaled(scale);
        let mut report = FilterReport::default();
        let (mut pred, mut truth) = (Vec::new(), Vec::new());
        for t in tracks {
            let (scored, r) = filter_trajectory(&t.points, &table, rules)?;
            report.merge(&r);
            for (s, y) in scored.iter().zip(&t.truth) {
                if s.retained {
                    pred.push(s.input.output);
                    truth.push(*y);
                }
            }
        }
        curve.push(SweepPoint {
            scale,
            total: report.total,
            retained: report.retained,
            ratio: report.ratio(),
            pcc: overall_pcc(&pred, &truth).ok(),
        });
    }
    Ok(curve)
}

/// `scale,total,retained,ratio,pcc` rows.
pub fn sweep_csv(curve: &[SweepPoint]) -> String {
    let mut s = String::from("scale,total,retained,ratio,pcc\n");
    for p in curve {
        let pcc = p.pcc.map_or("undefined".to_string(), |v| format!("{v:.6}"));
        let _ = writeln!(s, "{:.3},{},{},{},{pcc}", p.scale, p.total, p.retained, format_ratio(p.retained, p.total));
    }
    s
}
