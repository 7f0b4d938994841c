//! Command-line stages. Each command reads the run configuration, checks that
//! the artifacts of earlier stages exist, runs, writes its own artifacts to
//! the output directory and prints a one-line summary.

mod config;
mod io;

pub use config::{compact_model, ArmConfig, CopilotConfig, RunConfig, SweepConfig, CONFIG_VERSION};
pub use io::{columns_csv, ingest, parse_columns, read_trial, write_trial};

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::copilot::{
    decode_set, filter_trajectory, sweep_csv, threshold_sweep, Critic, FilterReport, TransitionRules,
};
use crate::kinematics::{
    evaluate, interpolate_joints, joint_csv, map_to_workspace, midpoint, solve_trajectory, ArmModel, EvalReport,
    Trajectory3D, KIN_DIMS,
};
use crate::model::{load_checkpoint, save_checkpoint, Decoder, ModelConfig};
use crate::signals::{NormalizationParams, WindowSpec};
use crate::train::{
    build_windows, fit_kinematics, generate_dataset, history_table, make_split, predict_set, preprocess_trial,
    train_loop, InputScaler, PreparedTrial, SplitPlan, TrainConfig, WindowSet, EMG_CHANNELS, KIN_NAMES,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("{0}")]
    Stage(String),
    #[error("I/O error: {0}")]
    Io(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    /// 1 for validation failures, 2 for runtime failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Data(_) => 1,
            CliError::Stage(_) | CliError::Io(_) | CliError::Runtime(_) => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "kinedec", version, about = "EEG/EMG hand-kinematics decoding pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Write a synthetic grasp-and-lift dataset to the data directory.
    Generate,
    /// Filter the trials, split them and fit normalization.
    Preprocess,
    /// Train the decoder, the state classifier and the critic.
    Train,
    /// Decode the test trials.
    Decode,
    /// Run the copilot over the decoded test trials.
    Filter,
    /// Per-axis and overall PCC/RMSE of the decoded test trials.
    Evaluate,
    /// Convert a decoded trajectory into joint angles for the arm.
    ExportArm,
    /// Window-length and delay sweeps.
    Sweep,
}

/// Splits `--config PATH` and `--key value` pairs out of the arguments that
/// follow the subcommand.
pub fn parse_overrides(args: &[String]) -> Result<(Option<PathBuf>, Vec<(String, String)>)> {
    let mut config = None;
    let mut pairs = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let key = a
            .strip_prefix("--")
            .ok_or_else(|| CliError::Config(format!("expected `--key value`, got `{a}`")))?;
        let (key, value) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| CliError::Config(format!("`--{key}` needs a value")))?;
                (key.to_string(), v.clone())
            }
        };
        if key == "config" {
            config = Some(PathBuf::from(value));
        } else {
            pairs.push((key.replace('-', "_"), value));
        }
    }
    Ok((config, pairs))
}

/// Parses the full argument list (program name first), runs the command and
/// returns the summary line.
pub fn run_args(args: &[String]) -> Result<String> {
    let split = args.iter().skip(1).position(|a| !a.starts_with('-')).map_or(args.len(), |i| i + 2);
    let cli = Cli::try_parse_from(&args[..split.min(args.len())]).map_err(|e| CliError::Config(e.to_string()))?;
    let (path, pairs) = parse_overrides(&args[split.min(args.len())..])?;
    let base = match path {
        Some(p) => RunConfig::load(&p)?,
        None => RunConfig::default(),
    };
    let cfg = base.with_overrides(&pairs)?;
    cfg.validate()?;
    run(cli.command, &cfg)
}

pub fn run(command: Command, cfg: &RunConfig) -> Result<String> {
    match command {
        Command::Generate => generate(cfg),
        Command::Preprocess => preprocess(cfg),
        Command::Train => train(cfg),
        Command::Decode => decode(cfg),
        Command::Filter => filter(cfg),
        Command::Evaluate => evaluate_cmd(cfg),
        Command::ExportArm => export_arm(cfg),
        Command::Sweep => sweep(cfg),
    }
}

fn out(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.output_dir.join(name)
}

fn require(path: &Path, stage: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Stage(format!("{} not found; run `kinedec {stage}` first", path.display())))
    }
}

pub fn generate(cfg: &RunConfig) -> Result<String> {
    let trials = generate_dataset(&cfg.synthetic, cfg.trials, cfg.seed).map_err(|e| CliError::Config(e.to_string()))?;
    for t in &trials {
        write_trial(&cfg.data_dir, t)?;
    }
    io::write_file(&cfg.data_dir.join("generator.json"), &(serde_json::to_string_pretty(&cfg.synthetic).expect("spec serializes") + "\n"))?;
    Ok(format!(
        "generate: wrote {} trials of {} s to {}",
        trials.len(),
        cfg.synthetic.duration_s,
        cfg.data_dir.display()
    ))
}

/// Split and normalization fitted by `preprocess`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessState {
    pub trial_ids: Vec<String>,
    pub split: SplitPlan,
    pub normalization: NormalizationParams,
    pub scaler: InputScaler,
}

fn prepared_trials(cfg: &RunConfig) -> Result<Vec<PreparedTrial>> {
    let raw = ingest(&cfg.data_dir, cfg.synthetic.rate_eeg, cfg.synthetic.rate_emg)?;
    raw.iter()
        .map(|t| preprocess_trial(t, &cfg.preprocess).map_err(|e| CliError::Data(format!("trial {}: {e}", t.id))))
        .collect()
}

fn pick(trials: &[PreparedTrial], ix: &[usize]) -> Vec<PreparedTrial> {
    ix.iter().map(|&i| trials[i].clone()).collect()
}

pub fn preprocess(cfg: &RunConfig) -> Result<String> {
    let trials = prepared_trials(cfg)?;
    let split = make_split(trials.len(), cfg.seed).map_err(|e| CliError::Data(e.to_string()))?;
    let train = pick(&trials, &split.train);
    let state = PreprocessState {
        trial_ids: trials.iter().map(|t| t.id.clone()).collect(),
        normalization: fit_kinematics(&train).map_err(|e| CliError::Data(e.to_string()))?,
        scaler: InputScaler::fit(&train).map_err(|e| CliError::Data(e.to_string()))?,
        split,
    };
    io::write_file(&out(cfg, "preprocess.json"), &(serde_json::to_string_pretty(&state).expect("state serializes") + "\n"))?;
    Ok(format!(
        "preprocess: {} trials, split {}/{}/{}, {} EEG samples per trial",
        trials.len(),
        state.split.train.len(),
        state.split.val.len(),
        state.split.test.len(),
        trials[0].eeg.samples()
    ))
}

/// Trials and fitted state, with the split checked against the data.
struct Prepared {
    trials: Vec<PreparedTrial>,
    state: PreprocessState,
}

impl Prepared {
    fn load(cfg: &RunConfig) -> Result<Self> {
        let path = out(cfg, "preprocess.json");
        require(&path, "preprocess")?;
        let state: PreprocessState =
            serde_json::from_str(&io::read_file(&path)?).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let trials = prepared_trials(cfg)?;
        let ids: Vec<String> = trials.iter().map(|t| t.id.clone()).collect();
        if ids != state.trial_ids {
            return Err(CliError::Stage(format!(
                "the trials in {} changed since preprocessing; run `kinedec preprocess` again",
                cfg.data_dir.display()
            )));
        }
        Ok(Self { trials, state })
    }

    fn subset(&self, ix: &[usize]) -> Vec<PreparedTrial> {
        pick(&self.trials, ix)
    }

    fn windows(&self, trials: &[PreparedTrial], spec: &WindowSpec, fusion: bool) -> Result<WindowSet> {
        build_windows(trials, &self.state.normalization, &self.state.scaler, spec, fusion).map_err(runtime)
    }
}

fn classifier_config(model: &ModelConfig) -> ModelConfig {
    ModelConfig {
        out_dim: 5,
        ..model.clone()
    }
}

pub fn train(cfg: &RunConfig) -> Result<String> {
    let p = Prepared::load(cfg)?;
    let (tr, va) = (p.subset(&p.state.split.train), p.subset(&p.state.split.val));
    let wtr = p.windows(&tr, &cfg.window, cfg.fusion)?;
    let wva = p.windows(&va, &cfg.window, cfg.fusion)?;
    if wtr.labels.iter().any(Option::is_none) {
        return Err(CliError::Data("the state classifier needs labels.csv for every training trial".into()));
    }
    let reg = train_loop(&cfg.model, &wtr, Some(&wva), &cfg.train).map_err(runtime)?;
    log::info!("decoder best epoch {}", reg.best_epoch);
    let cls = train_loop(&classifier_config(&cfg.model), &wtr, Some(&wva), &cfg.train).map_err(runtime)?;
    log::info!("classifier best epoch {}", cls.best_epoch);
    save_checkpoint(&out(cfg, "decoder.ckpt"), &reg.model).map_err(|e| CliError::Io(e.to_string()))?;
    save_checkpoint(&out(cfg, "classifier.ckpt"), &cls.model).map_err(|e| CliError::Io(e.to_string()))?;
    io::write_file(&out(cfg, "history.csv"), &history_table(&reg.history))?;
    io::write_file(&out(cfg, "classifier_history.csv"), &history_table(&cls.history))?;

    let decoded = decode_set(&reg.model, &cls.model, &wtr, cfg.train.batch_size).map_err(runtime)?;
    let critic = Critic::train(&decoded.critic_rows(), &decoded.errors(), &cfg.copilot.critic).map_err(runtime)?;
    io::write_file(&out(cfg, "critic.json"), &(serde_json::to_string(&critic).expect("critic serializes") + "\n"))?;
    let best = |o: &crate::train::TrainOutcome| o.history[o.best_epoch - 1].val_loss.unwrap_or(f64::NAN);
    Ok(format!(
        "train: {} windows, decoder val MSE {:.5} (epoch {}), classifier val CE {:.4} (epoch {}), critic alpha {:.3}",
        wtr.len(),
        best(&reg),
        reg.best_epoch,
        best(&cls),
        cls.best_epoch,
        critic.alpha
    ))
}

fn load_models(cfg: &RunConfig) -> Result<(Decoder, Decoder)> {
    let (d, c) = (out(cfg, "decoder.ckpt"), out(cfg, "classifier.ckpt"));
    require(&d, "train")?;
    require(&c, "train")?;
    let load = |p: &Path| load_checkpoint(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())));
    Ok((load(&d)?, load(&c)?))
}

const PRED_FILE: &str = "predictions.csv";

fn prediction_header() -> String {
    let mut s = String::from("trial,sample");
    for prefix in ["pred", "true"] {
        for n in KIN_NAMES {
            let _ = write!(s, ",{prefix}_{n}");
        }
    }
    s
}

pub fn decode(cfg: &RunConfig) -> Result<String> {
    let p = Prepared::load(cfg)?;
    let (dec, _) = load_models(cfg)?;
    let te = p.subset(&p.state.split.test);
    let set = p.windows(&te, &cfg.window, cfg.fusion)?;
    let pred = predict_set(&dec, &set, cfg.train.batch_size).map_err(runtime)?;
    let mut s = prediction_header();
    s.push('\n');
    for i in 0..set.len() {
        let _ = write!(s, "{},{}", te[set.trial[i]].id, set.target_index[i]);
        for v in &pred.output.data()[i * KIN_DIMS..(i + 1) * KIN_DIMS] {
            let _ = write!(s, ",{v}");
        }
        for v in set.target(i) {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    io::write_file(&out(cfg, PRED_FILE), &s)?;
    Ok(format!("decode: {} points from {} test trials -> {}", set.len(), te.len(), PRED_FILE))
}

/// One row of `predictions.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRow {
    pub trial: String,
    pub sample: usize,
    pub pred: [f64; KIN_DIMS],
    pub truth: [f64; KIN_DIMS],
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    let text = io::read_file(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(prediction_header().as_str()) {
        return Err(CliError::Data(format!("{}: unexpected header", path.display())));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let bad = || CliError::Data(format!("{} line {}: malformed row", path.display(), i + 2));
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 2 + 2 * KIN_DIMS {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            let mut pred = [0.0; KIN_DIMS];
            let mut truth = [0.0; KIN_DIMS];
            for d in 0..KIN_DIMS {
                pred[d] = num(f[2 + d])?;
                truth[d] = num(f[2 + KIN_DIMS + d])?;
            }
            Ok(PredictionRow {
                trial: f[0].to_string(),
                sample: f[1].parse().map_err(|_| bad())?,
                pred,
                truth,
            })
        })
        .collect()
}

pub fn metrics_csv(r: &EvalReport) -> String {
    let mut s = String::from("axis,pcc,rmse\n");
    for (d, n) in KIN_NAMES.iter().enumerate() {
        let _ = writeln!(s, "{n},{:.6},{:.6}", r.pcc[d], r.rmse[d]);
    }
    let _ = writeln!(s, "overall,{:.6},{:.6}", r.overall_pcc, r.overall_rmse);
    s
}

pub fn evaluate_cmd(cfg: &RunConfig) -> Result<String> {
    let path = out(cfg, PRED_FILE);
    require(&path, "decode")?;
    let rows = read_predictions(&path)?;
    let pred: Vec<_> = rows.iter().map(|r| r.pred).collect();
    let truth: Vec<_> = rows.iter().map(|r| r.truth).collect();
    let report = evaluate(&pred, &truth).map_err(|e| CliError::Data(e.to_string()))?;
    let table = metrics_csv(&report);
    io::write_file(&out(cfg, "metrics.csv"), &table)?;
    print!("{table}");
    Ok(format!(
        "evaluate: {} points, overall PCC {:.4}, RMSE {:.4}",
        rows.len(),
        report.overall_pcc,
        report.overall_rmse
    ))
}

fn load_rules(cfg: &RunConfig) -> Result<TransitionRules> {
    match &cfg.copilot.rules_file {
        Some(p) => TransitionRules::load(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display()))),
        None => Ok(TransitionRules::default()),
    }
}

pub fn filter(cfg: &RunConfig) -> Result<String> {
    let rules = load_rules(cfg)?;
    let p = Prepared::load(cfg)?;
    let (dec, cls) = load_models(cfg)?;
    let critic_path = out(cfg, "critic.json");
    require(&critic_path, "train")?;
    let critic: Critic = serde_json::from_str(&io::read_file(&critic_path)?)
        .map_err(|e| CliError::Data(format!("{}: {e}", critic_path.display())))?;
    let te = p.subset(&p.state.split.test);
    let set = p.windows(&te, &cfg.window, cfg.fusion)?;
    let decoded = decode_set(&dec, &cls, &set, cfg.train.batch_size).map_err(runtime)?;
    let confidence = critic.score_batch(&decoded.critic_rows()).map_err(runtime)?;
    let tracks = decoded.tracks(&confidence, &te).map_err(runtime)?;

    let mut report = FilterReport::default();
    let mut points = String::from("trial,sample,confidence,machine,effective,retained\n");
    for (t, track) in tracks.iter().enumerate() {
        let (scored, r) = filter_trajectory(&track.points, &cfg.copilot.thresholds, &rules).map_err(runtime)?;
        report.merge(&r);
        for s in &scored {
            let _ = writeln!(
                points,
                "{},{},{:.6},{},{},{}",
                te[t].id, s.input.index, s.input.confidence, s.machine, s.effective, s.retained as u8
            );
        }
    }
    io::write_file(&out(cfg, "filter_points.csv"), &points)?;
    io::write_file(&out(cfg, "filter_report.csv"), &report.to_csv())?;
    let curve = threshold_sweep(&tracks, &cfg.copilot.thresholds, &rules, &cfg.copilot.scales).map_err(runtime)?;
    io::write_file(&out(cfg, "copilot_sweep.csv"), &sweep_csv(&curve))?;
    Ok(format!(
        "filter: retained {}/{} points ({}) across {} test trials",
        report.retained,
        report.total,
        crate::copilot::format_ratio(report.retained, report.total),
        tracks.len()
    ))
}

pub fn export_arm(cfg: &RunConfig) -> Result<String> {
    let path = out(cfg, PRED_FILE);
    require(&path, "decode")?;
    let rows = read_predictions(&path)?;
    let trial = match &cfg.arm.trial {
        Some(t) => t.clone(),
        None => rows
            .first()
            .map(|r| r.trial.clone())
            .ok_or_else(|| CliError::Data(format!("{} has no rows", path.display())))?,
    };
    let rows: Vec<_> = rows.into_iter().filter(|r| r.trial == trial).collect();
    if rows.len() < 2 {
        return Err(CliError::Data(format!("trial {trial} has {} decoded points; need at least 2", rows.len())));
    }
    let arm = match &cfg.arm.arm_file {
        Some(p) => ArmModel::load(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?,
        None => ArmModel::panda(),
    };
    let t: Vec<f64> = rows.iter().map(|r| r.sample as f64 / cfg.window.rate_hz).collect();
    let kin_err = |e: crate::kinematics::KinematicsError| CliError::Data(e.to_string());
    let index = Trajectory3D::new(t.clone(), rows.iter().map(|r| [r.pred[0], r.pred[1], r.pred[2]]).collect(), false)
        .map_err(kin_err)?;
    let thumb = Trajectory3D::new(t, rows.iter().map(|r| [r.pred[3], r.pred[4], r.pred[5]]).collect(), false)
        .map_err(kin_err)?;
    let metric = map_to_workspace(&midpoint(&index, &thumb).map_err(kin_err)?, &cfg.arm.workspace).map_err(kin_err)?;
    let solved = solve_trajectory(&arm, &metric, &arm.ready, &cfg.arm.ik, cfg.arm.rate_hz).map_err(runtime)?;
    let joints = interpolate_joints(&solved.joints, cfg.arm.rate_hz).map_err(runtime)?;
    if let Some(bad) = joints.q().iter().find(|q| !arm.within_limits(q)) {
        return Err(CliError::Runtime(format!("exported configuration {bad:?} violates joint limits")));
    }
    let name = format!("joints_{trial}.csv");
    io::write_file(&out(cfg, &name), &joint_csv(&joints))?;
    let worst = solved.residuals.iter().copied().fold(0.0, f64::max);
    Ok(format!(
        "export-arm: trial {trial}, {} points -> {} joint samples at {} Hz, {} IK gaps, max residual {:.2e} m -> {name}",
        metric.len(),
        joints.len(),
        cfg.arm.rate_hz,
        solved.gaps.len(),
        worst
    ))
}

/// Test PCC of a freshly trained decoder for one window/delay setting.
fn sweep_point(p: &Prepared, cfg: &RunConfig, window: usize, delay_ms: u32) -> Result<f64> {
    let spec = WindowSpec::with_default_step(window, delay_ms, cfg.window.rate_hz).map_err(|e| CliError::Config(e.to_string()))?;
    let model = ModelConfig {
        window_samples: window,
        in_channels_emg: if cfg.fusion { EMG_CHANNELS } else { 0 },
        ..cfg.model.clone()
    };
    let tc = TrainConfig {
        epochs: cfg.sweep.epochs,
        ..cfg.train.clone()
    };
    let w = |ix: &[usize]| p.windows(&p.subset(ix), &spec, cfg.fusion);
    let (wtr, wva, wte) = (w(&p.state.split.train)?, w(&p.state.split.val)?, w(&p.state.split.test)?);
    let outcome = train_loop(&model, &wtr, Some(&wva), &tc).map_err(runtime)?;
    let pred = predict_set(&outcome.model, &wte, tc.batch_size).map_err(runtime)?;
    let rows = |flat: &[f64]| crate::kinematics::rows6(flat).map_err(runtime);
    let truth = rows(&wte.targets)?;
    let pcc = crate::kinematics::overall_pcc(&rows(pred.output.data())?, &truth).map_err(runtime)?;
    Ok(pcc)
}

pub fn sweep(cfg: &RunConfig) -> Result<String> {
    let p = Prepared::load(cfg)?;
    let mut table = String::from("kind,window_samples,delay_ms,test_pcc\n");
    let mut rows = 0;
    for &w in &cfg.sweep.windows {
        let pcc = sweep_point(&p, cfg, w, cfg.sweep.base_delay_ms)?;
        log::info!("window {w}: PCC {pcc:.4}");
        let _ = writeln!(table, "window,{w},{},{pcc:.6}", cfg.sweep.base_delay_ms);
        rows += 1;
    }
    for &d in &cfg.sweep.delays_ms {
        let pcc = sweep_point(&p, cfg, cfg.sweep.base_window, d)?;
        log::info!("delay {d} ms: PCC {pcc:.4}");
        let _ = writeln!(table, "delay,{},{d},{pcc:.6}", cfg.sweep.base_window);
        rows += 1;
    }
    io::write_file(&out(cfg, "sweep.csv"), &table)?;
    Ok(format!("sweep: {rows} settings -> sweep.csv"))
}
