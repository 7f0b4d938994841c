mod common;

use approx::{assert_abs_diff_eq, assert_relative_eq};
use kinedec::kinematics::*;
use proptest::prelude::*;
use rand::Rng;

/// r = Σ dx·dy / √(Σdx² · Σdy²) with two-pass means.
fn textbook_pcc(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for i in 0..a.len() {
        num += (a[i] - ma) * (b[i] - mb);
        da += (a[i] - ma) * (a[i] - ma);
        db += (b[i] - mb) * (b[i] - mb);
    }
    num / (da * db).sqrt()
}

fn random_rows(rng: &mut impl Rng, n: usize) -> Vec<[f64; KIN_DIMS]> {
    (0..n).map(|_| std::array::from_fn(|_| rng.gen_range(-2.0..2.0))).collect()
}

#[test]
fn pcc_examples() {
    assert_eq!(pcc(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
    assert_eq!(pcc(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
    assert_abs_diff_eq!(pcc(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap(), 0.8, epsilon = 1e-15);
}

#[test]
fn pcc_degenerate_inputs_are_errors() {
    assert!(matches!(pcc(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(KinematicsError::Constant(_))));
    assert!(matches!(pcc(&[1.0, 2.0, 3.0], &[2.0, 2.0, 2.0]), Err(KinematicsError::Constant(_))));
    assert!(matches!(pcc(&[1.0, 2.0], &[1.0, 2.0, 3.0]), Err(KinematicsError::Length(2, 3))));
    assert!(matches!(pcc(&[1.0], &[1.0]), Err(KinematicsError::TooShort(1))));
}

#[test]
fn overall_pcc_matches_flatten_oracle_exactly() {
    let mut rng = common::rng(40);
    for n in [2, 3, 7, 50] {
        let p = random_rows(&mut rng, n);
        let t = random_rows(&mut rng, n);
        let flat_p: Vec<f64> = (0..KIN_DIMS).flat_map(|d| p.iter().map(move |r| r[d])).collect();
        let flat_t: Vec<f64> = (0..KIN_DIMS).flat_map(|d| t.iter().map(move |r| r[d])).collect();
        assert_eq!(flat_p.len(), 6 * n);
        assert_eq!(concat_axes(&p), flat_p);
        assert_eq!(overall_pcc(&p, &t).unwrap(), textbook_pcc(&flat_p, &flat_t));
        // Row-major flattening is a permutation of the same pairs.
        let row_p: Vec<f64> = p.iter().flatten().copied().collect();
        let row_t: Vec<f64> = t.iter().flatten().copied().collect();
        assert_abs_diff_eq!(overall_pcc(&p, &t).unwrap(), common::pearson(&row_p, &row_t), epsilon = 1e-12);
    }
    let p = random_rows(&mut rng, 10);
    assert_eq!(overall_pcc(&p, &p).unwrap(), 1.0);
    assert!(overall_pcc(&p, &p[..9]).is_err());
}

#[test]
fn rmse_examples() {
    assert_eq!(rmse(&[1.0, -2.0], &[1.0, -2.0]).unwrap(), 0.0);
    assert_eq!(rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 12.5f64.sqrt());
    assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
}

#[test]
fn evaluate_reports_axes_and_overall() {
    let mut rng = common::rng(41);
    let p = random_rows(&mut rng, 30);
    let t = random_rows(&mut rng, 30);
    let r = evaluate(&p, &t).unwrap();
    for d in 0..KIN_DIMS {
        assert_eq!(r.pcc[d], pcc(&axis(&p, d), &axis(&t, d)).unwrap());
        assert_eq!(r.rmse[d], rmse(&axis(&p, d), &axis(&t, d)).unwrap());
    }
    assert_eq!(r.overall_pcc, overall_pcc(&p, &t).unwrap());
    assert_eq!(rows6(&concat_axes(&p)).unwrap().len(), 30);
    assert!(rows6(&[0.0; 7]).is_err());
}

fn seq(n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (
        prop::collection::vec(-100.0f64..100.0, n),
        prop::collection::vec(-100.0f64..100.0, n),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn pcc_is_bounded_and_affine_invariant(
        (a, b) in (3usize..60).prop_flat_map(seq),
        alpha in 0.01f64..100.0,
        beta in -50.0f64..50.0,
    ) {
        let Ok(r) = pcc(&a, &b) else { return Ok(()) };
        prop_assert!((-1.0..=1.0).contains(&r));
        let b2: Vec<f64> = b.iter().map(|v| alpha * v + beta).collect();
        let a2: Vec<f64> = a.iter().map(|v| alpha * v + beta).collect();
        prop_assert!((pcc(&a, &b2).unwrap() - r).abs() <= 1e-12);
        prop_assert!((pcc(&a2, &b).unwrap() - r).abs() <= 1e-12);
        prop_assert!((pcc(&b, &a).unwrap() - r).abs() <= 1e-15);
    }

    #[test]
    fn rmse_homogeneity((a, b) in (1usize..60).prop_flat_map(seq), k in -20i32..20, neg in any::<bool>(), c in -50.0f64..50.0) {
        let base = rmse(&a, &b).unwrap();
        // Power-of-two scales are exact in binary floating point.
        let p2 = if neg { -(2f64.powi(k)) } else { 2f64.powi(k) };
        let sa: Vec<f64> = a.iter().map(|v| p2 * v).collect();
        let sb: Vec<f64> = b.iter().map(|v| p2 * v).collect();
        prop_assert_eq!(rmse(&sa, &sb).unwrap(), p2.abs() * base);
        let sa: Vec<f64> = a.iter().map(|v| c * v).collect();
        let sb: Vec<f64> = b.iter().map(|v| c * v).collect();
        prop_assert!((rmse(&sa, &sb).unwrap() - c.abs() * base).abs() <= 1e-12 * (1.0 + c.abs() * base));
    }

    #[test]
    fn rmse_zero_iff_equal((a, mut b) in (1usize..30).prop_flat_map(seq), i in any::<prop::sample::Index>()) {
        prop_assert_eq!(rmse(&a, &a).unwrap(), 0.0);
        let j = i.index(a.len());
        b.clone_from(&a);
        b[j] += 1e-3;
        prop_assert!(rmse(&a, &b).unwrap() > 0.0);
    }
}

fn traj(points: Vec<[f64; 3]>, metric: bool) -> Trajectory3D {
    Trajectory3D::uniform(points, 10.0, metric).unwrap()
}

#[test]
fn midpoint_examples() {
    let a = traj(vec![[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]], false);
    let b = traj(vec![[2.0, 4.0, 6.0], [1.0, 1.0, 1.0]], false);
    let m = midpoint(&a, &b).unwrap();
    assert_eq!(m.points(), &[[1.0, 2.0, 3.0], [1.0, 1.0, 1.0]]);
    assert_eq!(midpoint(&b, &a).unwrap(), m);
    assert_eq!(midpoint(&a, &a).unwrap(), a);
    let shifted = Trajectory3D::new(vec![0.0, 0.2], a.points().to_vec(), false).unwrap();
    assert!(midpoint(&a, &shifted).is_err());
}

#[test]
fn trajectory_validation() {
    assert!(Trajectory3D::new(vec![0.0, 0.0], vec![[0.0; 3]; 2], false).is_err());
    assert!(Trajectory3D::new(vec![0.0, 1.0], vec![[0.0, f64::NAN, 0.0]; 2], false).is_err());
    assert!(Trajectory3D::new(vec![0.0], vec![[0.0; 3]; 2], false).is_err());
}

#[test]
fn workspace_mapping() {
    let b = WorkspaceBox::default();
    for i in 0..3 {
        assert_abs_diff_eq!(b.centre()[i], [0.45, 0.0, 0.35][i], epsilon = 1e-15);
        assert_abs_diff_eq!(b.max[i] - b.min[i], 0.5, epsilon = 1e-15);
    }
    let half = traj(vec![[0.5, 0.5, 0.5]], false);
    let m = map_to_workspace(&half, &b).unwrap();
    assert!(m.is_metric());
    for i in 0..3 {
        assert_abs_diff_eq!(m.points()[0][i], b.centre()[i], epsilon = 1e-15);
    }
    let unit = WorkspaceBox {
        min: [0.0; 3],
        max: [1.0; 3],
    };
    let mut rng = common::rng(42);
    let pts: Vec<[f64; 3]> = (0..50).map(|_| std::array::from_fn(|_| rng.gen_range(-0.2..1.2))).collect();
    let t = traj(pts, false);
    assert_eq!(map_to_workspace(&t, &unit).unwrap().points(), t.points());
    let back = unmap_from_workspace(&map_to_workspace(&t, &b).unwrap(), &b).unwrap();
    for (p, q) in back.points().iter().zip(t.points()) {
        for i in 0..3 {
            assert_abs_diff_eq!(p[i], q[i], epsilon = 1e-12);
        }
    }
    assert!(map_to_workspace(&m, &b).is_err());
    let flat = WorkspaceBox {
        min: [0.0; 3],
        max: [1.0, 0.0, 1.0],
    };
    assert!(map_to_workspace(&t, &flat).is_err());
}

fn random_q(arm: &ArmModel, rng: &mut impl Rng) -> [f64; JOINTS] {
    std::array::from_fn(|i| rng.gen_range(arm.joints[i].lower..arm.joints[i].upper))
}

#[test]
fn zero_configuration_gives_frozen_home_pose() {
    let arm = ArmModel::panda();
    let t = arm.forward(&[0.0; JOINTS]);
    let p = arm.tool_position(&[0.0; JOINTS]);
    assert_abs_diff_eq!(p[0], 0.088, epsilon = 1e-12);
    assert_abs_diff_eq!(p[1], 0.0, epsilon = 1e-12);
    assert_abs_diff_eq!(p[2], 0.926, epsilon = 1e-12);
    // Tool frame points straight down: x along base x, z along −z.
    let r = [[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]];
    for i in 0..3 {
        for j in 0..3 {
            assert_abs_diff_eq!(t[(i, j)], r[i][j], epsilon = 1e-12);
        }
    }
}

#[test]
fn last_joint_rolls_about_the_tool_axis() {
    let arm = ArmModel::panda();
    let mut rng = common::rng(43);
    for _ in 0..50 {
        let q = random_q(&arm, &mut rng);
        let mut q2 = q;
        q2[6] = rng.gen_range(arm.joints[6].lower..arm.joints[6].upper);
        let (a, b) = (arm.tool_position(&q), arm.tool_position(&q2));
        for i in 0..3 {
            assert_abs_diff_eq!(a[i], b[i], epsilon = 1e-12);
        }
    }
}

#[test]
fn jacobian_matches_finite_differences_and_bounds_motion() {
    let arm = ArmModel::panda();
    let mut rng = common::rng(44);
    let h = 1e-6;
    for _ in 0..50 {
        let q = random_q(&arm, &mut rng);
        let jac = arm.jacobian(&q);
        for j in 0..JOINTS {
            let (mut qp, mut qm) = (q, q);
            qp[j] += h;
            qm[j] -= h;
            let (a, b) = (arm.tool_position(&qp), arm.tool_position(&qm));
            for i in 0..3 {
                assert_abs_diff_eq!(jac[(i, j)], (a[i] - b[i]) / (2.0 * h), epsilon = 1e-8);
            }
        }
        // Lipschitz bound from the Jacobian norm plus a curvature allowance.
        let lip = jac.norm() + 1e-3;
        let delta: [f64; JOINTS] = std::array::from_fn(|_| rng.gen_range(-1e-4..1e-4));
        let qd: [f64; JOINTS] = std::array::from_fn(|i| q[i] + delta[i]);
        let (a, b) = (arm.tool_position(&q), arm.tool_position(&qd));
        let moved = ((0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>()).sqrt();
        let step = delta.iter().map(|d| d * d).sum::<f64>().sqrt();
        assert!(moved <= lip * step, "moved {moved} > {lip} × {step}");
    }
}

#[test]
fn ik_is_a_no_op_at_the_start_pose() {
    let arm = ArmModel::panda();
    let sol = inverse_kinematics(&arm, arm.tool_position(&arm.ready), &arm.ready, &IkConfig::default()).unwrap();
    assert_eq!(sol.iterations, 0);
    assert_eq!(sol.q, arm.ready);
    assert_eq!(sol.trace.len(), 1);
}

#[test]
fn ik_round_trips_100_random_reachable_targets() {
    let arm = ArmModel::panda();
    let cfg = IkConfig::default();
    assert_eq!((cfg.tol, cfg.max_iters, cfg.damping), (1e-3, 200, 0.05));
    let mut rng = common::rng(45);
    for k in 0..100 {
        let target = arm.tool_position(&random_q(&arm, &mut rng));
        let sol = inverse_kinematics(&arm, target, &arm.ready, &cfg)
            .unwrap_or_else(|e| panic!("target {k} {target:?}: {e}"));
        assert!(arm.within_limits(&sol.q));
        let p = arm.tool_position(&sol.q);
        let r = ((0..3).map(|i| (p[i] - target[i]).powi(2)).sum::<f64>()).sqrt();
        assert!(r <= 1e-3 && sol.iterations <= 200);
        assert_eq!(r, sol.residual);
        assert!(sol.trace.windows(2).all(|w| w[1] <= w[0]));
    }
}

#[test]
fn unreachable_target_fails_with_monotone_residuals() {
    let arm = ArmModel::panda();
    let err = inverse_kinematics(&arm, [3.0, 0.0, 0.5], &arm.ready, &IkConfig::default()).unwrap_err();
    match err {
        KinematicsError::IkNotConverged {
            best_residual,
            iterations,
            best_q,
            trace,
        } => {
            assert_eq!(iterations, 200);
            assert_eq!(trace.len(), 201);
            assert!(trace.windows(2).all(|w| w[1] <= w[0]));
            assert_eq!(*trace.last().unwrap(), best_residual);
            assert!(best_residual > 1.5 && best_residual < trace[0]);
            assert!(arm.within_limits(&best_q));
        }
        e => panic!("unexpected error {e}"),
    }
    let outside = [0.0; JOINTS];
    assert!(inverse_kinematics(&arm, [0.3, 0.0, 0.5], &outside, &IkConfig::default()).is_err());
}

#[test]
fn interpolation_examples() {
    let jt = JointTrajectory::new(vec![0.0, 1.0], vec![[0.0; JOINTS], [1.0; JOINTS]]).unwrap();
    let out = interpolate_joints(&jt, 10.0).unwrap();
    assert_eq!(out.len(), 11);
    assert_eq!(out.timestamps()[5], 0.5);
    assert_eq!(out.q()[5], [0.5; JOINTS]);
    assert_eq!(out.q()[0], jt.q()[0]);
    assert_eq!(out.q()[10], jt.q()[1]);
    assert_eq!(out.timestamps()[10], 1.0);

    let uniform = interpolate_joints(&jt, 10.0).unwrap();
    assert_eq!(interpolate_joints(&uniform, 10.0).unwrap(), uniform);
    assert!(interpolate_joints(&jt, 0.0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn interpolation_keeps_endpoints_and_step_bound(
        gaps in prop::collection::vec(0.05f64..0.5, 1..20),
        values in prop::collection::vec(prop::array::uniform7(-2.0f64..2.0), 21),
        rate in 20.0f64..100.0,
    ) {
        let mut t = vec![0.3];
        for g in &gaps {
            t.push(t.last().unwrap() + g);
        }
        let q = values[..t.len()].to_vec();
        let jt = JointTrajectory::new(t.clone(), q.clone()).unwrap();
        let out = interpolate_joints(&jt, rate).unwrap();
        prop_assert_eq!(out.timestamps()[0], t[0]);
        prop_assert_eq!(*out.timestamps().last().unwrap(), *t.last().unwrap());
        prop_assert_eq!(out.q()[0], q[0]);
        prop_assert_eq!(*out.q().last().unwrap(), *q.last().unwrap());
        prop_assert!(out.max_step() <= jt.max_step() + 1e-12);
        let dt: Vec<f64> = out.timestamps().windows(2).map(|w| w[1] - w[0]).collect();
        prop_assert!(dt.iter().all(|d| *d <= 1.0 / rate + 1e-12));
        let spread = dt.iter().fold(0.0f64, |m, d| m.max((d - dt[0]).abs()));
        prop_assert!(spread <= 1e-9);
    }
}

#[test]
fn constant_trajectory_gives_constant_joints() {
    let arm = ArmModel::panda();
    let p = [0.45, 0.05, 0.35];
    let t = Trajectory3D::uniform(vec![p; 20], 50.0, true).unwrap();
    let out = solve_trajectory(&arm, &t, &arm.ready, &IkConfig::default(), 100.0).unwrap();
    assert!(out.gaps.is_empty());
    let first = out.joints.q()[0];
    assert!(out.joints.q().iter().all(|q| *q == first));
}

#[test]
fn solved_trajectory_tracks_input_and_respects_limits() {
    let arm = ArmModel::panda();
    let b = WorkspaceBox::default();
    let n = 200;
    let pts: Vec<[f64; 3]> = (0..n)
        .map(|i| {
            let s = i as f64 / n as f64 * std::f64::consts::TAU;
            [0.5 + 0.3 * s.cos(), 0.5 + 0.4 * s.sin(), 0.5 + 0.2 * (2.0 * s).sin()]
        })
        .collect();
    let norm = Trajectory3D::uniform(pts, 100.0, false).unwrap();
    let metric = map_to_workspace(&norm, &b).unwrap();
    let cfg = IkConfig::default();
    let out = solve_trajectory(&arm, &metric, &arm.ready, &cfg, 250.0).unwrap();
    assert!(out.gaps.is_empty());
    assert_eq!(out.knots.len(), n);
    for (q, p) in out.knots.q().iter().zip(metric.points()) {
        let f = arm.tool_position(q);
        let r = ((0..3).map(|i| (f[i] - p[i]).powi(2)).sum::<f64>()).sqrt();
        assert!(r <= cfg.tol);
    }
    assert!(out.joints.q().iter().all(|q| arm.within_limits(q)));
    assert!(solve_trajectory(&arm, &norm, &arm.ready, &cfg, 250.0).is_err());
}

#[test]
fn joint_csv_layout() {
    let arm = ArmModel::panda();
    let jt = JointTrajectory::new(vec![0.0, 0.004], vec![arm.ready, arm.ready]).unwrap();
    let csv = joint_csv(&jt);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "t,q1,q2,q3,q4,q5,q6,q7");
    assert_eq!(lines[1], "0,0,-0.785398163,0,-2.35619449,0,1.57079633,0.785398163");
    assert!(lines[2].starts_with("0.00400000000,"));
    for line in &lines[1..] {
        let vals: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(vals.len(), 8);
        for (v, r) in vals[1..].iter().zip(&arm.ready) {
            assert_relative_eq!(*v, *r, max_relative = 1e-8);
        }
    }
}

#[test]
fn arm_description_parsing() {
    let arm = ArmModel::panda();
    assert_eq!(arm.name, "panda");
    assert!(arm.joints.iter().all(|j| j.lower < j.upper));
    let text = include_str!("../assets/panda.arm");
    let cases = [
        text.replace("joint4 = ", "joint9 = "),
        text.replace("lower=-2.8973 upper=2.8973\njoint2", "lower=2.8973 upper=-2.8973\njoint2"),
        text.replace("flange = a=0.0 d=0.107 alpha=0.0", ""),
        text.replace("d=0.316", "d=abc"),
        text.replace("d=0.316", "d=0.316 d=0.3"),
        text.replace("name = panda", "colour = red"),
        text.replace("ready = 0.0 ", "ready = "),
    ];
    for (i, c) in cases.iter().enumerate() {
        assert!(ArmModel::parse(c).is_err(), "case {i} parsed");
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("arm.arm");
    std::fs::write(&path, text).unwrap();
    assert_eq!(ArmModel::load(&path).unwrap(), arm);
}
