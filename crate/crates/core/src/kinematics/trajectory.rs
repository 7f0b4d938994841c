use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::arm::JOINTS;
use super::{KinematicsError, Result};

fn check_times(t: &[f64]) -> Result<()> {
    if t.iter().any(|v| !v.is_finite()) {
        return Err(KinematicsError::Trajectory("non-finite timestamp".into()));
    }
    if let Some(w) = t.windows(2).find(|w| w[1] <= w[0]) {
        return Err(KinematicsError::Trajectory(format!(
            "timestamps must increase strictly ({} then {})",
            w[0], w[1]
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory3D {
    timestamps: Vec<f64>,
    points: Vec<[f64; 3]>,
    /// Metres when true, normalized `[0, 1]` coordinates otherwise.
    metric: bool,
}

impl Trajectory3D {
    pub fn new(timestamps: Vec<f64>, points: Vec<[f64; 3]>, metric: bool) -> Result<Self> {
        if timestamps.len() != points.len() {
            return Err(KinematicsError::Length(timestamps.len(), points.len()));
        }
        check_times(&timestamps)?;
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(KinematicsError::Trajectory("non-finite coordinate".into()));
        }
        Ok(Self {
            timestamps,
            points,
            metric,
        })
    }

    /// Points sampled at `rate_hz` from t = 0.
    pub fn uniform(points: Vec<[f64; 3]>, rate_hz: f64, metric: bool) -> Result<Self> {
        let t = (0..points.len()).map(|i| i as f64 / rate_hz).collect();
        Self::new(t, points, metric)
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn is_metric(&self) -> bool {
        self.metric
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn reversed(&self) -> Result<Self> {
        let end = self.timestamps.last().copied().unwrap_or(0.0);
        let t0 = self.timestamps.first().copied().unwrap_or(0.0);
        let t = self.timestamps.iter().rev().map(|v| t0 + end - v).collect();
        Self::new(t, self.points.iter().rev().copied().collect(), self.metric)
    }
}

/// Pointwise mean of the index and thumb trajectories.
pub fn midpoint(index: &Trajectory3D, thumb: &Trajectory3D) -> Result<Trajectory3D> {
    if index.timestamps != thumb.timestamps {
        return Err(KinematicsError::Trajectory("midpoint inputs have different timestamps".into()));
    }
    if index.metric != thumb.metric {
        return Err(KinematicsError::Trajectory("midpoint inputs mix metric and normalized units".into()));
    }
    let points = index
        .points
        .iter()
        .zip(&thumb.points)
        .map(|(a, b)| [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0, (a[2] + b[2]) / 2.0])
        .collect();
    Trajectory3D::new(index.timestamps.clone(), points, index.metric)
}

/// Axis-aligned box in the arm base frame, metres.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkspaceBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Default for WorkspaceBox {
    /// 0.5 m cube centred at (0.45, 0, 0.35), in front of the arm.
    fn default() -> Self {
        Self {
            min: [0.2, -0.25, 0.1],
            max: [0.7, 0.25, 0.6],
        }
    }
}

impl WorkspaceBox {
    pub fn validate(&self) -> Result<()> {
        if (0..3).all(|i| self.min[i].is_finite() && self.max[i].is_finite() && self.min[i] < self.max[i]) {
            Ok(())
        } else {
            Err(KinematicsError::Trajectory(format!("workspace box {self:?} must have min < max on every axis")))
        }
    }

    pub fn centre(&self) -> [f64; 3] {
        std::array::from_fn(|i| (self.min[i] + self.max[i]) / 2.0)
    }
}

/// Componentwise affine map from `[0, 1]` onto the box.
pub fn map_to_workspace(t: &Trajectory3D, b: &WorkspaceBox) -> Result<Trajectory3D> {
    b.validate()?;
    if t.metric {
        return Err(KinematicsError::Trajectory("trajectory is already metric".into()));
    }
    let points = t
        .points
        .iter()
        .map(|p| std::array::from_fn(|i| b.min[i] + p[i] * (b.max[i] - b.min[i])))
        .collect();
    Trajectory3D::new(t.timestamps.clone(), points, true)
}

pub fn unmap_from_workspace(t: &Trajectory3D, b: &WorkspaceBox) -> Result<Trajectory3D> {
    b.validate()?;
    if !t.metric {
        return Err(KinematicsError::Trajectory("trajectory is not metric".into()));
    }
    let points = t
        .points
        .iter()
        .map(|p| std::array::from_fn(|i| (p[i] - b.min[i]) / (b.max[i] - b.min[i])))
        .collect();
    Trajectory3D::new(t.timestamps.clone(), points, false)
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointTrajectory {
    timestamps: Vec<f64>,
    q: Vec<[f64; JOINTS]>,
}

impl JointTrajectory {
    pub fn new(timestamps: Vec<f64>, q: Vec<[f64; JOINTS]>) -> Result<Self> {
        if timestamps.len() != q.len() {
            return Err(KinematicsError::Length(timestamps.len(), q.len()));
        }
        check_times(&timestamps)?;
        if q.iter().flatten().any(|v| !v.is_finite()) {
            return Err(KinematicsError::Trajectory("non-finite joint angle".into()));
        }
        Ok(Self { timestamps, q })
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn q(&self) -> &[[f64; JOINTS]] {
        &self.q
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    /// Largest absolute change of any joint between consecutive samples.
    pub fn max_step(&self) -> f64 {
        self.q
            .windows(2)
            .flat_map(|w| (0..JOINTS).map(move |j| (w[1][j] - w[0][j]).abs()))
            .fold(0.0, f64::max)
    }
}

/// Linear interpolation onto a uniform grid spanning the input exactly. The
/// step is the duration divided by `ceil(duration · rate)`, so it never
/// exceeds `1 / out_rate_hz`.
pub fn interpolate_joints(jt: &JointTrajectory, out_rate_hz: f64) -> Result<JointTrajectory> {
    if !(out_rate_hz > 0.0 && out_rate_hz.is_finite()) {
        return Err(KinematicsError::Trajectory(format!("output rate {out_rate_hz} must be positive")));
    }
    let t = &jt.timestamps;
    if t.len() < 2 {
        return Ok(jt.clone());
    }
    let (t0, t1) = (t[0], t[t.len() - 1]);
    let dur = t1 - t0;
    let n = ((dur * out_rate_hz) - 1e-9).ceil().max(1.0) as usize;
    let step = dur / n as f64;
    let on_grid = t.len() == n + 1 && t.iter().enumerate().all(|(i, &v)| (v - (t0 + i as f64 * step)).abs() <= 1e-9 * dur.max(1.0));
    if on_grid {
        return Ok(jt.clone());
    }
    let mut out_t = Vec::with_capacity(n + 1);
    let mut out_q = Vec::with_capacity(n + 1);
    let mut k = 0;
    for i in 0..=n {
        let ti = if i == n { t1 } else { t0 + i as f64 * step };
        while k + 2 < t.len() && t[k + 1] <= ti {
            k += 1;
        }
        let s = ((ti - t[k]) / (t[k + 1] - t[k])).clamp(0.0, 1.0);
        let (a, b) = (&jt.q[k], &jt.q[k + 1]);
        let q = if i == n {
            *b
        } else if s == 0.0 {
            *a
        } else {
            std::array::from_fn(|j| a[j] + s * (b[j] - a[j]))
        };
        out_t.push(ti);
        out_q.push(q);
    }
    JointTrajectory::new(out_t, out_q)
}

/// Formats `v` with 9 significant digits in positional notation, or
/// scientific notation outside `1e-6 ..= 1e15`.
fn sig9(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{v:.8e}");
    // The exponent of the rounded value, so 9.999999999 counts as 10.
    let mag: i32 = sci.rsplit('e').next().and_then(|e| e.parse().ok()).unwrap_or(0);
    if !(-6..=15).contains(&mag) {
        return sci;
    }
    let decimals = (8 - mag).max(0) as usize;
    format!("{v:.decimals$}")
}

/// CSV with header `t,q1,…,q7`.
pub fn joint_csv(jt: &JointTrajectory) -> String {
    let mut s = String::from("t");
    for j in 1..=JOINTS {
        let _ = write!(s, ",q{j}");
    }
    s.push('\n');
    for (t, q) in jt.timestamps.iter().zip(&jt.q) {
        s.push_str(&sig9(*t));
        for v in q {
            s.push(',');
            s.push_str(&sig9(*v));
        }
        s.push('\n');
    }
    s
}
