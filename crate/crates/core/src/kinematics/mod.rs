//! Trajectory metrics, workspace mapping and 7-DOF arm kinematics.

mod arm;
mod trajectory;

pub use arm::{inverse_kinematics, solve_trajectory, ArmModel, IkConfig, IkSolution, Joint, SolvedTrajectory, JOINTS};
pub use trajectory::{
    interpolate_joints, joint_csv, map_to_workspace, midpoint, unmap_from_workspace, JointTrajectory, Trajectory3D,
    WorkspaceBox,
};

use thiserror::Error;

/// Output dimensions: index xyz, thumb xyz.
pub const KIN_DIMS: usize = 6;

#[derive(Debug, Error)]
pub enum KinematicsError {
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("need at least 2 samples, got {0}")]
    TooShort(usize),
    #[error("correlation undefined: {0} sequence is constant")]
    Constant(&'static str),
    #[error("invalid trajectory: {0}")]
    Trajectory(String),
    #[error("arm description line {line}: {msg}")]
    ArmFile { line: usize, msg: String },
    #[error("invalid arm model: {0}")]
    Arm(String),
    #[error("IK did not converge after {iterations} iterations (best residual {best_residual:.3e})")]
    IkNotConverged {
        best_residual: f64,
        iterations: usize,
        best_q: [f64; JOINTS],
        trace: Vec<f64>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, KinematicsError>;

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Pearson correlation. Errors instead of returning NaN when either input is
/// constant.
pub fn pcc(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(KinematicsError::Length(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(KinematicsError::TooShort(a.len()));
    }
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 {
        return Err(KinematicsError::Constant("first"));
    }
    if sbb == 0.0 {
        return Err(KinematicsError::Constant("second"));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

pub fn rmse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(KinematicsError::Length(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(KinematicsError::TooShort(0));
    }
    Ok((a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64).sqrt())
}

/// Concatenates the six axis sequences of each input and correlates the
/// results.
pub fn overall_pcc(pred: &[[f64; KIN_DIMS]], truth: &[[f64; KIN_DIMS]]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(KinematicsError::Length(pred.len(), truth.len()));
    }
    let (p, t) = (concat_axes(pred), concat_axes(truth));
    debug_assert_eq!(p.len(), KIN_DIMS * pred.len());
    pcc(&p, &t)
}

/// Axis-major concatenation: all of axis 0, then axis 1, and so on.
pub fn concat_axes(rows: &[[f64; KIN_DIMS]]) -> Vec<f64> {
    (0..KIN_DIMS).flat_map(|d| rows.iter().map(move |r| r[d])).collect()
}

pub fn axis(rows: &[[f64; KIN_DIMS]], d: usize) -> Vec<f64> {
    rows.iter().map(|r| r[d]).collect()
}

/// Regroups a row-major `N × 6` buffer.
pub fn rows6(flat: &[f64]) -> Result<Vec<[f64; KIN_DIMS]>> {
    if flat.len() % KIN_DIMS != 0 {
        return Err(KinematicsError::Length(flat.len(), flat.len() / KIN_DIMS * KIN_DIMS));
    }
    Ok(flat
        .chunks_exact(KIN_DIMS)
        .map(|c| c.try_into().expect("chunk of six"))
        .collect())
}

/// Per-axis and overall PCC/RMSE.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub pcc: [f64; KIN_DIMS],
    pub rmse: [f64; KIN_DIMS],
    pub overall_pcc: f64,
    pub overall_rmse: f64,
}

pub fn evaluate(pred: &[[f64; KIN_DIMS]], truth: &[[f64; KIN_DIMS]]) -> Result<EvalReport> {
    let mut r = EvalReport {
        pcc: [0.0; KIN_DIMS],
        rmse: [0.0; KIN_DIMS],
        overall_pcc: overall_pcc(pred, truth)?,
        overall_rmse: rmse(&concat_axes(pred), &concat_axes(truth))?,
    };
    for d in 0..KIN_DIMS {
        let (p, t) = (axis(pred, d), axis(truth, d));
        r.pcc[d] = pcc(&p, &t)?;
        r.rmse[d] = rmse(&p, &t)?;
    }
    Ok(r)
}
