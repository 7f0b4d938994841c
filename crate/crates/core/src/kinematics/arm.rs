use std::path::Path;

use nalgebra::{Matrix3, Matrix4, SMatrix, Vector3};
use serde::{Deserialize, Serialize};

use super::trajectory::{interpolate_joints, JointTrajectory, Trajectory3D};
use super::{KinematicsError, Result};

pub const JOINTS: usize = 7;

const PANDA: &str = include_str!("../../assets/panda.arm");

/// One revolute joint in modified DH form: `a` and `alpha` of the preceding
/// link, `d` along this joint's axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Joint {
    pub a: f64,
    pub d: f64,
    pub alpha: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmModel {
    pub name: String,
    pub joints: [Joint; JOINTS],
    /// Fixed transform from the last joint frame to the tool point.
    pub flange: [f64; 3],
    /// Default starting configuration.
    pub ready: [f64; JOINTS],
}

fn link(a: f64, alpha: f64, d: f64, theta: f64) -> Matrix4<f64> {
    let (st, ct) = theta.sin_cos();
    let (sa, ca) = alpha.sin_cos();
    Matrix4::new(
        ct,
        -st,
        0.0,
        a,
        st * ca,
        ct * ca,
        -sa,
        -sa * d,
        st * sa,
        ct * sa,
        ca,
        ca * d,
        0.0,
        0.0,
        0.0,
        1.0,
    )
}

fn position(t: &Matrix4<f64>) -> Vector3<f64> {
    Vector3::new(t[(0, 3)], t[(1, 3)], t[(2, 3)])
}

fn parse_fields(line: usize, text: &str, keys: &[&str]) -> Result<Vec<f64>> {
    let err = |msg: String| KinematicsError::ArmFile { line, msg };
    let mut out = vec![None; keys.len()];
    for tok in text.split_whitespace() {
        let (k, v) = tok.split_once('=').ok_or_else(|| err(format!("expected key=value, got `{tok}`")))?;
        let i = keys.iter().position(|&x| x == k).ok_or_else(|| err(format!("unknown field `{k}`")))?;
        let v: f64 = v.parse().map_err(|_| err(format!("`{v}` is not a number")))?;
        if out[i].replace(v).is_some() {
            return Err(err(format!("duplicate field `{k}`")));
        }
    }
    keys.iter()
        .zip(out)
        .map(|(k, v)| v.ok_or_else(|| err(format!("missing field `{k}`"))))
        .collect()
}

impl ArmModel {
    /// The shipped Panda-like description.
    pub fn panda() -> Self {
        Self::parse(PANDA).expect("shipped arm description is valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Parses the `key = value` description format; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut name = None;
        let mut joints: [Option<Joint>; JOINTS] = [None; JOINTS];
        let mut flange = None;
        let mut ready = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let err = |msg: String| KinematicsError::ArmFile { line, msg };
            let (key, value) = content
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| err("expected `key = value`".into()))?;
            match key {
                "name" => name = Some(value.to_string()),
                "flange" => {
                    let v = parse_fields(line, value, &["a", "d", "alpha"])?;
                    flange = Some([v[0], v[1], v[2]]);
                }
                "ready" => {
                    let v: Vec<f64> = value
                        .split_whitespace()
                        .map(|s| s.parse().map_err(|_| err(format!("`{s}` is not a number"))))
                        .collect::<Result<_>>()?;
                    let v: [f64; JOINTS] = v
                        .try_into()
                        .map_err(|v: Vec<f64>| err(format!("ready pose needs {JOINTS} angles, got {}", v.len())))?;
                    ready = Some(v);
                }
                k if k.starts_with("joint") => {
                    let idx: usize = k[5..].parse().map_err(|_| err(format!("bad joint key `{k}`")))?;
                    if !(1..=JOINTS).contains(&idx) {
                        return Err(err(format!("joint index {idx} outside 1..={JOINTS}")));
                    }
                    let v = parse_fields(line, value, &["a", "d", "alpha", "lower", "upper"])?;
                    let j = Joint {
                        a: v[0],
                        d: v[1],
                        alpha: v[2],
                        lower: v[3],
                        upper: v[4],
                    };
                    if joints[idx - 1].replace(j).is_some() {
                        return Err(err(format!("joint {idx} defined twice")));
                    }
                }
                other => return Err(err(format!("unknown key `{other}`"))),
            }
        }
        let missing = |what: &str| KinematicsError::Arm(format!("description lacks {what}"));
        let mut js = [Joint {
            a: 0.0,
            d: 0.0,
            alpha: 0.0,
            lower: 0.0,
            upper: 0.0,
        }; JOINTS];
        for (i, j) in joints.iter().enumerate() {
            js[i] = j.ok_or_else(|| missing(&format!("joint{}", i + 1)))?;
        }
        let arm = Self {
            name: name.unwrap_or_else(|| "arm".into()),
            joints: js,
            flange: flange.ok_or_else(|| missing("flange"))?,
            ready: ready.ok_or_else(|| missing("ready"))?,
        };
        arm.validate()?;
        Ok(arm)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, j) in self.joints.iter().enumerate() {
            let vals = [j.a, j.d, j.alpha, j.lower, j.upper];
            if vals.iter().any(|v| !v.is_finite()) || j.lower >= j.upper {
                return Err(KinematicsError::Arm(format!("joint {} needs finite parameters and lower < upper", i + 1)));
            }
        }
        if self.flange.iter().any(|v| !v.is_finite()) {
            return Err(KinematicsError::Arm("non-finite flange".into()));
        }
        if !self.within_limits(&self.ready) {
            return Err(KinematicsError::Arm("ready pose violates joint limits".into()));
        }
        Ok(())
    }

    pub fn within_limits(&self, q: &[f64; JOINTS]) -> bool {
        q.iter().zip(&self.joints).all(|(v, j)| *v >= j.lower && *v <= j.upper)
    }

    pub fn clamp(&self, q: &[f64; JOINTS]) -> [f64; JOINTS] {
        std::array::from_fn(|i| q[i].clamp(self.joints[i].lower, self.joints[i].upper))
    }

    /// Joint frames 1..=7 followed by the tool frame, in the base frame.
    fn frames(&self, q: &[f64; JOINTS]) -> [Matrix4<f64>; JOINTS + 1] {
        let mut out = [Matrix4::identity(); JOINTS + 1];
        let mut t = Matrix4::identity();
        for (i, j) in self.joints.iter().enumerate() {
            t *= link(j.a, j.alpha, j.d, q[i]);
            out[i] = t;
        }
        let [a, d, alpha] = self.flange;
        out[JOINTS] = t * link(a, alpha, d, 0.0);
        out
    }

    /// Tool pose as a homogeneous transform.
    pub fn forward(&self, q: &[f64; JOINTS]) -> Matrix4<f64> {
        self.frames(q)[JOINTS]
    }

    pub fn tool_position(&self, q: &[f64; JOINTS]) -> [f64; 3] {
        let p = position(&self.forward(q));
        [p.x, p.y, p.z]
    }

    /// Position Jacobian `∂p/∂q` (3 × 7).
    pub fn jacobian(&self, q: &[f64; JOINTS]) -> SMatrix<f64, 3, JOINTS> {
        let f = self.frames(q);
        let pe = position(&f[JOINTS]);
        let mut jac = SMatrix::<f64, 3, JOINTS>::zeros();
        for i in 0..JOINTS {
            let z = Vector3::new(f[i][(0, 2)], f[i][(1, 2)], f[i][(2, 2)]);
            jac.set_column(i, &z.cross(&(pe - position(&f[i]))));
        }
        jac
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IkConfig {
    /// Position tolerance, metres.
    pub tol: f64,
    pub max_iters: usize,
    /// Initial and minimum damping.
    pub damping: f64,
}

impl Default for IkConfig {
    fn default() -> Self {
        Self {
            tol: 1e-3,
            max_iters: 200,
            damping: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IkSolution {
    pub q: [f64; JOINTS],
    pub residual: f64,
    pub iterations: usize,
    /// Residual before the first iteration and after each one.
    pub trace: Vec<f64>,
}

fn residual(arm: &ArmModel, q: &[f64; JOINTS], target: &Vector3<f64>) -> (Vector3<f64>, f64) {
    let e = target - position(&arm.forward(q));
    (e, e.norm())
}

/// Damped step `Jᵀ(JJᵀ + λ²I)⁻¹e`. Joints pinned at a limit and pushed
/// further out are dropped from the Jacobian and the step is recomputed.
fn dls_step(arm: &ArmModel, q: &[f64; JOINTS], e: &Vector3<f64>, lambda: f64) -> [f64; JOINTS] {
    let mut jac = arm.jacobian(q);
    let mut dq = [0.0; JOINTS];
    for _ in 0..2 {
        let a = jac * jac.transpose() + Matrix3::identity() * (lambda * lambda);
        let Some(inv) = a.try_inverse() else { break };
        let step = jac.transpose() * (inv * e);
        dq = std::array::from_fn(|i| step[i]);
        let mut pinned = false;
        for (i, j) in arm.joints.iter().enumerate() {
            if (q[i] <= j.lower && dq[i] < 0.0) || (q[i] >= j.upper && dq[i] > 0.0) {
                jac.set_column(i, &Vector3::zeros());
                pinned = true;
            }
        }
        if !pinned {
            break;
        }
    }
    dq
}

/// Position-only damped least squares with joint clamping each iteration.
/// Steps that do not reduce the residual are rejected and the damping raised,
/// so the residual trace never increases.
pub fn inverse_kinematics(
    arm: &ArmModel,
    target: [f64; 3],
    q_init: &[f64; JOINTS],
    cfg: &IkConfig,
) -> Result<IkSolution> {
    if target.iter().any(|v| !v.is_finite()) {
        return Err(KinematicsError::Trajectory("IK target is not finite".into()));
    }
    if !arm.within_limits(q_init) {
        return Err(KinematicsError::Arm("IK start pose violates joint limits".into()));
    }
    let target = Vector3::from(target);
    let mut q = *q_init;
    let (mut e, mut r) = residual(arm, &q, &target);
    let mut trace = vec![r];
    let mut lambda = cfg.damping;
    let mut iterations = 0;
    while r > cfg.tol && iterations < cfg.max_iters {
        iterations += 1;
        let dq = dls_step(arm, &q, &e, lambda);
        let cand = arm.clamp(&std::array::from_fn(|i| q[i] + dq[i]));
        let (ce, cr) = residual(arm, &cand, &target);
        if cr < r {
            (q, e, r) = (cand, ce, cr);
            lambda = (lambda * 0.5).max(cfg.damping);
        } else {
            lambda *= 4.0;
        }
        trace.push(r);
    }
    if r <= cfg.tol {
        Ok(IkSolution {
            q,
            residual: r,
            iterations,
            trace,
        })
    } else {
        Err(KinematicsError::IkNotConverged {
            best_residual: r,
            iterations,
            best_q: q,
            trace,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolvedTrajectory {
    /// One configuration per solved input point.
    pub knots: JointTrajectory,
    /// `knots` resampled onto a uniform grid.
    pub joints: JointTrajectory,
    /// Indices of input points whose IK failed.
    pub gaps: Vec<usize>,
    pub residuals: Vec<f64>,
}

/// Sequential IK warm-started from the previous solution, then linear
/// resampling at `out_rate_hz`.
pub fn solve_trajectory(
    arm: &ArmModel,
    traj: &Trajectory3D,
    q_start: &[f64; JOINTS],
    cfg: &IkConfig,
    out_rate_hz: f64,
) -> Result<SolvedTrajectory> {
    if !traj.is_metric() {
        return Err(KinematicsError::Trajectory("IK needs a metric trajectory; map it to the workspace first".into()));
    }
    let mut q = *q_start;
    let (mut t, mut qs, mut gaps, mut residuals) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (i, (&ti, p)) in traj.timestamps().iter().zip(traj.points()).enumerate() {
        match inverse_kinematics(arm, *p, &q, cfg) {
            Ok(sol) => {
                q = sol.q;
                t.push(ti);
                qs.push(q);
                residuals.push(sol.residual);
            }
            Err(KinematicsError::IkNotConverged { best_residual, .. }) => {
                log::warn!("IK gap at point {i} (t = {ti:.4} s): best residual {best_residual:.3e} m");
                gaps.push(i);
            }
            Err(e) => return Err(e),
        }
    }
    if qs.is_empty() {
        return Err(KinematicsError::Trajectory("IK failed at every trajectory point".into()));
    }
    let knots = JointTrajectory::new(t, qs)?;
    let joints = interpolate_joints(&knots, out_rate_hz)?;
    Ok(SolvedTrajectory {
        knots,
        joints,
        gaps,
        residuals,
    })
}
