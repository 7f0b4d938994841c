mod common;

use kinedec::copilot::*;
use proptest::prelude::*;
use rand::Rng;

const PEAKED: [[f64; 5]; 5] = [
    [0.9, 0.025, 0.025, 0.025, 0.025],
    [0.025, 0.9, 0.025, 0.025, 0.025],
    [0.025, 0.025, 0.9, 0.025, 0.025],
    [0.025, 0.025, 0.025, 0.9, 0.025],
    [0.025, 0.025, 0.025, 0.025, 0.9],
];

fn point(index: usize, posterior: [f64; 5], confidence: f64, sensors: SensorFrame) -> PointInput {
    PointInput {
        index,
        output: [0.0; 6],
        posterior,
        confidence,
        sensors,
    }
}

/// Ranks with ties averaged.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut ix: Vec<usize> = (0..x.len()).collect();
    ix.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).unwrap());
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < ix.len() {
        let mut j = i;
        while j + 1 < ix.len() && x[ix[j + 1]] == x[ix[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &k in &ix[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    common::pearson(&ranks(a), &ranks(b))
}

#[test]
fn threshold_table_validation() {
    let t = ThresholdTable::default();
    assert_eq!(t.states, [0.5; 5]);
    assert_eq!(t.unrely, 0.8);
    t.validate().unwrap();
    assert!(ThresholdTable::new([0.2, 0.3, 0.9, 0.1, 0.4], 0.9).is_err());
    assert!(ThresholdTable::new([0.2, 0.3, 1.1, 0.1, 0.4], 1.2).is_err());
    assert!(ThresholdTable::new([0.2, -0.1, 0.5, 0.1, 0.4], 0.6).is_err());
    assert!(ThresholdTable::new([0.2, 0.3, 0.9, 0.1, 0.4], 0.95).is_ok());
    assert_eq!(t.threshold(MotionState::Unrely), 0.8);
    assert_eq!(t.scaled(2.0).threshold(MotionState::Holding), 1.0);
}

#[test]
fn default_rule_examples() {
    let rules = TransitionRules::default();
    let p = PEAKED[0];
    let contact = [1.0, 0.0, 0.0, 0.0];
    assert_eq!(fsm_step(MotionState::Searching, &p, &contact, &rules).unwrap(), MotionState::Lifting);
    let quiet = [0.0; 4];
    assert_eq!(fsm_step(MotionState::Holding, &p, &quiet, &rules).unwrap(), MotionState::Holding);
    let end = [0.0, 0.0, 0.0, 1.0];
    assert_eq!(fsm_step(MotionState::Returning, &p, &end, &rules).unwrap(), MotionState::Searching);
    assert!(fsm_step(MotionState::Unrely, &p, &quiet, &rules).is_err());
}

#[test]
fn full_cycle_follows_task_order() {
    let rules = TransitionRules::default();
    let frames = [
        [0.0, 0.0, 0.0, 0.0],
        [1.0, 0.0, 0.0, 0.0],
        [1.0, 0.06, 0.0, 0.0],
        [1.0, 0.05, -0.05, 0.0],
        [0.0, 0.0, 0.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ];
    let mut s = MotionState::Searching;
    let mut seen = vec![];
    for f in &frames {
        s = fsm_step(s, &PEAKED[0], f, &rules).unwrap();
        seen.push(s);
    }
    use MotionState::*;
    assert_eq!(seen, [Searching, Lifting, Holding, Putting, Returning, Searching]);
}

#[test]
fn rule_file_round_trip_and_errors() {
    let rules = TransitionRules::default();
    assert_eq!(TransitionRules::parse(&rules.to_text()).unwrap(), rules);

    let base = DEFAULT_RULES;
    let overlap_same = format!("{base}SEARCHING contact_force > 0.3 HOLDING\n");
    assert!(matches!(TransitionRules::parse(&overlap_same), Err(CopilotError::RuleTable(_))));
    let overlap_other = format!("{base}SEARCHING object_height > 0.3 HOLDING\n");
    assert!(matches!(TransitionRules::parse(&overlap_other), Err(CopilotError::RuleTable(_))));
    let touching = format!("{base}SEARCHING contact_force <= 0.5 SEARCHING\n");
    assert!(TransitionRules::parse(&touching).is_ok());
    let closed = format!("{base}SEARCHING contact_force >= 0.5 SEARCHING\n");
    assert!(TransitionRules::parse(&closed).is_err());
    let inclusive = format!("{base}SEARCHING contact_force <= 0.5 SEARCHING\nSEARCHING contact_force >= 0.5 LIFTING\n");
    assert!(TransitionRules::parse(&inclusive).is_err());

    let unreachable = base.replace("HOLDING       object_vz", "LIFTING       object_vz");
    assert!(matches!(TransitionRules::parse(&unreachable), Err(CopilotError::RuleTable(_))));
    assert!(TransitionRules::parse(&format!("{base}HOLDING trial_end > 0.5 UNRELY\n")).is_err());

    for (bad, line) in [
        ("SEARCHING contact_force > 0.5\n", 1),
        ("# c\nSEARCHING grip > 0.5 LIFTING\n", 2),
        ("SEARCHING contact_force != 0.5 LIFTING\n", 1),
        ("SEARCHING contact_force > nan LIFTING\n", 1),
        ("WAITING contact_force > 0.5 LIFTING\n", 1),
    ] {
        match TransitionRules::parse(bad) {
            Err(CopilotError::RuleFile { line: l, .. }) => assert_eq!(l, line, "{bad}"),
            other => panic!("{bad}: {other:?}"),
        }
    }
}

#[test]
fn random_sequences_never_enter_unrely() {
    let rules = TransitionRules::default();
    let mut rng = common::rng(11);
    let mut visited = std::collections::BTreeSet::new();
    for _ in 0..10_000 {
        let mut s = MotionState::Searching;
        for _ in 0..20 {
            let sensors = [
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..0.1),
                rng.gen_range(-0.05..0.05),
                (rng.gen::<f64>() < 0.2) as u8 as f64,
            ];
            let p = PEAKED[rng.gen_range(0..5)];
            s = fsm_step(s, &p, &sensors, &rules).unwrap();
            assert!(s.is_real());
            visited.insert(s);
        }
    }
    assert_eq!(visited.len(), 5);
}

#[test]
fn attribution_examples() {
    use MotionState::*;
    assert_eq!(attribute_point(Holding, &PEAKED[2]), Holding);
    assert_eq!(attribute_point(Holding, &PEAKED[0]), Unrely);
    assert_eq!(attribute_point(Lifting, &[0.4, 0.4, 0.1, 0.05, 0.05]), Lifting);
    assert_eq!(attribute_point(Searching, &[0.4, 0.4, 0.1, 0.05, 0.05]), Searching);
    assert_eq!(attribute_point(Holding, &[0.4, 0.4, 0.1, 0.05, 0.05]), Unrely);
}

#[test]
fn zero_and_unit_thresholds() {
    let rules = TransitionRules::default();
    let mut rng = common::rng(3);
    let pts: Vec<_> = (0..50)
        .map(|i| point(i, PEAKED[rng.gen_range(0..5)], rng.gen_range(0.0..=1.0), [0.0; 4]))
        .collect();
    let (out, rep) = filter_trajectory(&pts, &ThresholdTable::default().scaled(0.0), &rules).unwrap();
    assert!(out.iter().all(|p| p.retained));
    assert_eq!(rep.ratio(), Some(1.0));

    let above_one = ThresholdTable::new([1.0 + 1e-9; 5], 1.1);
    assert!(above_one.is_err());
    let strict = ThresholdTable {
        states: [1.0 + 1e-9; 5],
        unrely: 1.1,
    };
    let mut all_one = pts.clone();
    all_one.iter_mut().for_each(|p| p.confidence = 1.0);
    let (_, rep) = filter_trajectory(&all_one, &strict, &rules).unwrap();
    assert_eq!(rep.retained, 0);
    assert_eq!(rep.ratio(), Some(0.0));
}

#[test]
fn empty_input_has_undefined_ratio() {
    let (out, rep) = filter_trajectory(&[], &ThresholdTable::default(), &TransitionRules::default()).unwrap();
    assert!(out.is_empty());
    assert_eq!(rep.ratio(), None);
    assert!(rep.to_csv().ends_with("ALL,0,0,undefined\n"));
}

#[test]
fn retention_ratio_arithmetic() {
    assert_eq!(format_ratio(672, 2410), "27.88%");
    let pts: Vec<_> = (0..2410)
        .map(|i| point(i, PEAKED[0], if i % 10 < 3 && i < 2240 { 0.9 } else { 0.1 }, [0.0; 4]))
        .collect();
    let (_, rep) = filter_trajectory(&pts, &ThresholdTable::default(), &TransitionRules::default()).unwrap();
    assert_eq!((rep.retained, rep.total), (672, 2410));
    assert!((rep.ratio().unwrap() - 0.278838174273859).abs() < 1e-15);
    assert!(rep.to_csv().contains("SEARCHING,2410,672,27.88%"));
    assert!(rep.to_csv().ends_with("ALL,2410,672,27.88%\n"));
}

#[test]
fn unrely_points_face_the_stricter_threshold() {
    let rules = TransitionRules::default();
    // Machine stays in SEARCHING; the second point's classifier disagrees.
    let pts = [point(0, PEAKED[0], 0.7, [0.0; 4]), point(1, PEAKED[3], 0.7, [0.0; 4])];
    let (out, rep) = filter_trajectory(&pts, &ThresholdTable::default(), &rules).unwrap();
    assert_eq!(out[1].machine, MotionState::Searching);
    assert_eq!(out[1].effective, MotionState::Unrely);
    assert_eq!([out[0].retained, out[1].retained], [true, false]);
    assert_eq!(rep.counts[&MotionState::Unrely], (1, 0));
}

#[test]
fn filter_input_validation() {
    let rules = TransitionRules::default();
    let t = ThresholdTable::default();
    let unordered = [point(3, PEAKED[0], 0.5, [0.0; 4]), point(3, PEAKED[0], 0.5, [0.0; 4])];
    assert!(filter_trajectory(&unordered, &t, &rules).is_err());
    let bad_post = [point(0, [0.5, 0.5, 0.5, 0.0, 0.0], 0.5, [0.0; 4])];
    assert!(filter_trajectory(&bad_post, &t, &rules).is_err());
    let bad_conf = [point(0, PEAKED[0], 1.5, [0.0; 4])];
    assert!(filter_trajectory(&bad_conf, &t, &rules).is_err());
}

fn random_points(seed: u64, n: usize) -> Vec<PointInput> {
    let mut rng = common::rng(seed);
    (0..n)
        .map(|i| {
            let mut post: [f64; 5] = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
            let z: f64 = post.iter().sum();
            post.iter_mut().for_each(|p| *p /= z);
            let sensors = [
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..0.1),
                rng.gen_range(-0.05..0.05),
                (rng.gen::<f64>() < 0.05) as u8 as f64,
            ];
            point(i, post, rng.gen_range(0.0..=1.0), sensors)
        })
        .collect()
}

proptest! {
    #[test]
    fn retention_monotone_in_thresholds(seed in 0u64..1000, bumps in prop::array::uniform5(0.0f64..0.3), extra in 0.0f64..0.3) {
        let rules = TransitionRules::default();
        let pts = random_points(seed, 80);
        let lo = ThresholdTable::new([0.3, 0.4, 0.5, 0.2, 0.45], 0.6).unwrap();
        let hi = ThresholdTable {
            states: std::array::from_fn(|i| lo.states[i] + bumps[i]),
            unrely: lo.unrely + extra,
        };
        let (a, ra) = filter_trajectory(&pts, &lo, &rules).unwrap();
        let (b, rb) = filter_trajectory(&pts, &hi, &rules).unwrap();
        prop_assert!(rb.retained <= ra.retained);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!(!y.retained || x.retained);
        }
    }

    #[test]
    fn sweep_retention_never_rises(seed in 0u64..1000) {
        let pts = random_points(seed, 60);
        let track = Track { truth: pts.iter().map(|p| p.output).collect(), points: pts };
        let scales: Vec<f64> = (0..=15).map(|i| i as f64 / 10.0).collect();
        let curve = threshold_sweep(&[track], &ThresholdTable::default(), &TransitionRules::default(), &scales).unwrap();
        prop_assert_eq!(curve[0].ratio, Some(1.0));
        for w in curve.windows(2) {
            prop_assert!(w[1].retained <= w[0].retained);
        }
    }

    #[test]
    fn filtering_is_pure(seed in 0u64..1000) {
        let pts = random_points(seed, 40);
        let t = ThresholdTable::default();
        let rules = TransitionRules::default();
        let a = filter_trajectory(&pts, &t, &rules).unwrap();
        let b = filter_trajectory(&pts, &t, &rules).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn critic_output_in_unit_interval(seed in 0u64..1000, scale in 0.1f64..50.0) {
        let mut rng = common::rng(seed);
        let mut c = Critic::zeroed(8, 4);
        c.w1.iter_mut().for_each(|w| *w = rng.gen_range(-scale..scale));
        c.w2.iter_mut().for_each(|w| *w = rng.gen_range(-scale..scale));
        c.b2 = rng.gen_range(-scale..scale);
        let rows: Vec<Vec<f64>> = (0..20).map(|_| (0..8).map(|_| rng.gen_range(-10.0..10.0)).collect()).collect();
        for v in c.score_batch(&rows).unwrap() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}

#[test]
fn zero_critic_gives_one_half() {
    let c = Critic::zeroed(12, 16);
    let mut rng = common::rng(5);
    let rows: Vec<Vec<f64>> = (0..10).map(|_| (0..12).map(|_| rng.gen_range(-5.0..5.0)).collect()).collect();
    assert!(c.score_batch(&rows).unwrap().iter().all(|&v| v == 0.5));
    assert_eq!(c.score(&[0.0; 6], &PEAKED[1], 3.0).unwrap(), 0.5);
    assert!(c.score(&[0.0; 5], &PEAKED[1], 3.0).is_err());
}

#[test]
fn alpha_maps_median_error_to_one_half() {
    let e = [0.3, 0.1, 0.2, 5.0];
    let a = alpha_from_errors(&e).unwrap();
    assert!(((-a * 0.25f64).exp() - 0.5).abs() < 1e-15);
    assert!(alpha_from_errors(&[0.0, 0.0, 1.0]).is_err());
    assert!(alpha_from_errors(&[]).is_err());
}

#[test]
fn jerk_and_softmax_helpers() {
    let quad: Vec<[f64; 6]> = (0..10).map(|i| [(i * i) as f64; 6]).collect();
    assert!(local_jerk(&quad)[3..].iter().all(|&j| j == 0.0));
    let cubic: Vec<[f64; 6]> = (0..10).map(|i| [(i * i * i) as f64, 0.0, 0.0, 0.0, 0.0, 0.0]).collect();
    assert!(local_jerk(&cubic)[3..].iter().all(|&j| j == 6.0));
    assert_eq!(local_jerk(&[[1.0; 6]]), vec![0.0]);

    let p = softmax5(&[1000.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
    assert_eq!(p[0], 1.0);
    let p = softmax5(&[0.0; 5]).unwrap();
    assert!(p.iter().all(|&v| (v - 0.2).abs() < 1e-15));
    assert!(softmax5(&[0.0; 4]).is_err());
}

#[test]
fn trained_critic_ranks_errors() {
    // Error depends on two of six features; the critic must discover which.
    let mut rng = common::rng(21);
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    for _ in 0..600 {
        let latent: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let post = PEAKED[rng.gen_range(0..5)];
        let jerk = rng.gen_range(0.0..2.0);
        errors.push(0.05 + latent[1].abs() + 0.5 * jerk + rng.gen_range(0.0..0.1));
        rows.push(critic_features(&latent, &post, jerk));
    }
    let cfg = CriticConfig {
        seed: 4,
        epochs: 60,
        ..CriticConfig::default()
    };
    let critic = Critic::train(&rows, &errors, &cfg).unwrap();
    let c = critic.score_batch(&rows).unwrap();
    let neg: Vec<f64> = errors.iter().map(|e| -e).collect();
    let rho = spearman(&c, &neg);
    assert!(rho > 0.5, "spearman {rho}");
    assert_eq!(Critic::train(&rows, &errors, &cfg).unwrap(), critic);
    assert!(Critic::train(&rows, &errors[1..], &cfg).is_err());
}

#[test]
fn oracle_confidence_never_hurts_above_half_retention() {
    let rules = TransitionRules::default();
    let scales: Vec<f64> = (0..=40).map(|i| i as f64 / 20.0).collect();
    for seed in 0..5 {
        let mut rng = common::rng(100 + seed);
        let n = 400;
        let truth: Vec<[f64; 6]> = (0..n)
            .map(|i| std::array::from_fn(|d| (0.03 * i as f64 + d as f64).sin()))
            .collect();
        let spread: Vec<f64> = (0..n).map(|_| (rng.gen_range(-2.0f64..1.0)).exp() * 0.3).collect();
        let pred: Vec<[f64; 6]> = truth
            .iter()
            .zip(&spread)
            .map(|(t, s)| std::array::from_fn(|d| t[d] + s * rng.gen_range(-1.0..1.0)))
            .collect();
        let errors: Vec<f64> = pred.iter().zip(&truth).map(|(p, t)| point_error(p, t)).collect();
        let alpha = alpha_from_errors(&errors).unwrap();
        let points = (0..n)
            .map(|i| PointInput {
                index: i,
                output: pred[i],
                posterior: PEAKED[0],
                confidence: (-alpha * errors[i]).exp(),
                sensors: [0.0; 4],
            })
            .collect();
        let track = Track { points, truth };
        let curve = threshold_sweep(&[track], &ThresholdTable::default(), &rules, &scales).unwrap();
        let base = curve[0].pcc.unwrap();
        let mut checked = 0;
        for p in curve.iter().filter(|p| p.ratio.unwrap() >= 0.5) {
            assert!(p.pcc.unwrap() >= base, "seed {seed} scale {}: {:?} < {base}", p.scale, p.pcc);
            checked += 1;
        }
        assert!(checked > 5, "seed {seed}: only {checked} sweep points above half retention");
    }
}
