//! Dataset directory layout, one directory per trial:
//!
//! ```text
//! <data_dir>/trial_<id>/eeg.csv      32 columns at the EEG rate
//!                       emg.csv      5 columns at the EMG rate
//!                       kin.csv      6 columns at the EEG rate
//!                       labels.csv   optional, one `state` column
//!                       events.csv   optional, contact_force,object_height,object_vz,trial_end
//! ```
//!
//! Each file starts with a header row; time is implicit from the rate.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{CliError, Result};
use crate::copilot::MotionState;
use crate::signals::{SignalKind, TimeSeriesBlock};
use crate::train::{TrialBundle, TrialEvents, EEG_CHANNELS, EMG_CHANNELS, KIN_NAMES};

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

pub fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

/// Header plus one row per sample, shortest round-trip float formatting.
pub fn columns_csv(names: &[String], columns: &[Vec<f64>]) -> String {
    let n = columns.first().map_or(0, Vec::len);
    let mut s = names.join(",");
    s.push('\n');
    for i in 0..n {
        for (j, c) in columns.iter().enumerate() {
            if j > 0 {
                s.push(',');
            }
            let _ = write!(s, "{}", c[i]);
        }
        s.push('\n');
    }
    s
}

/// Parses a headed numeric CSV into its header and columns.
pub fn parse_columns(text: &str, path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| CliError::Data(format!("{}: empty file", path.display())))?;
    let names: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
    let mut cols = vec![Vec::new(); names.len()];
    for (i, line) in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != names.len() {
            return Err(CliError::Data(format!(
                "{} line {}: {} fields, header has {}",
                path.display(),
                i + 1,
                fields.len(),
                names.len()
            )));
        }
        for (c, f) in cols.iter_mut().zip(fields) {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| CliError::Data(format!("{} line {}: `{f}` is not a number", path.display(), i + 1)))?;
            c.push(v);
        }
    }
    Ok((names, cols))
}

fn read_block(path: &Path, kind: SignalKind, channels: usize, rate: f64) -> Result<TimeSeriesBlock> {
    let (names, cols) = parse_columns(&read_file(path)?, path)?;
    if cols.len() != channels {
        return Err(CliError::Data(format!(
            "{}: expected {channels} channels, found {}",
            path.display(),
            cols.len()
        )));
    }
    TimeSeriesBlock::new(cols, rate, kind, names).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn write_trial(dir: &Path, trial: &TrialBundle) -> Result<()> {
    let d = dir.join(format!("trial_{}", trial.id));
    for (name, block) in [("eeg", &trial.eeg), ("emg", &trial.emg), ("kin", &trial.kin)] {
        write_file(&d.join(format!("{name}.csv")), &columns_csv(block.channel_names(), block.data()))?;
    }
    if let Some(labels) = &trial.labels {
        let mut s = String::from("state\n");
        for l in labels {
            let _ = writeln!(s, "{l}");
        }
        write_file(&d.join("labels.csv"), &s)?;
    }
    if let Some(ev) = &trial.events {
        let names: Vec<String> = TrialEvents::FEATURES.iter().map(|s| s.to_string()).collect();
        let cols = [&ev.contact_force, &ev.object_height, &ev.object_vz, &ev.trial_end].map(|c| c.to_vec());
        write_file(&d.join("events.csv"), &columns_csv(&names, &cols))?;
    }
    Ok(())
}

pub fn read_trial(dir: &Path, eeg_rate: f64, emg_rate: f64) -> Result<TrialBundle> {
    let id = dir
        .file_name()
        .and_then(|n| n.to_str())
        .and_then(|n| n.strip_prefix("trial_"))
        .ok_or_else(|| CliError::Data(format!("{} is not a trial directory", dir.display())))?
        .to_string();
    let eeg = read_block(&dir.join("eeg.csv"), SignalKind::Eeg, EEG_CHANNELS, eeg_rate)?;
    let emg = read_block(&dir.join("emg.csv"), SignalKind::Emg, EMG_CHANNELS, emg_rate)?;
    let kin = read_block(&dir.join("kin.csv"), SignalKind::Kin, KIN_NAMES.len(), eeg_rate)?;
    if kin.samples() != eeg.samples() {
        return Err(CliError::Data(format!(
            "{}: kin has {} samples, eeg {}",
            dir.display(),
            kin.samples(),
            eeg.samples()
        )));
    }
    let quantum = 1.0 / eeg_rate;
    if (emg.duration_s() - eeg.duration_s()).abs() > quantum + 1e-12 {
        return Err(CliError::Data(format!(
            "{}: EMG lasts {} s but EEG {} s",
            dir.display(),
            emg.duration_s(),
            eeg.duration_s()
        )));
    }
    let labels_path = dir.join("labels.csv");
    let labels = if labels_path.exists() {
        let text = read_file(&labels_path)?;
        let states = text
            .lines()
            .skip(1)
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.parse::<MotionState>().map_err(|e| CliError::Data(format!("{}: {e}", labels_path.display()))))
            .collect::<Result<Vec<_>>>()?;
        if states.len() != eeg.samples() {
            return Err(CliError::Data(format!(
                "{}: {} labels for {} samples",
                labels_path.display(),
                states.len(),
                eeg.samples()
            )));
        }
        Some(states)
    } else {
        None
    };
    let events_path = dir.join("events.csv");
    let events = if events_path.exists() {
        let (names, mut cols) = parse_columns(&read_file(&events_path)?, &events_path)?;
        if names != TrialEvents::FEATURES || cols.iter().any(|c| c.len() != eeg.samples()) {
            return Err(CliError::Data(format!(
                "{}: expected columns {:?} with {} rows",
                events_path.display(),
                TrialEvents::FEATURES,
                eeg.samples()
            )));
        }
        let trial_end = cols.pop().expect("four columns");
        let object_vz = cols.pop().expect("four columns");
        let object_height = cols.pop().expect("four columns");
        let contact_force = cols.pop().expect("four columns");
        Some(TrialEvents {
            contact_force,
            object_height,
            object_vz,
            trial_end,
        })
    } else {
        None
    };
    Ok(TrialBundle {
        id,
        eeg,
        emg,
        kin,
        labels,
        events,
    })
}

/// Reads every `trial_*` directory in name order. Malformed trials are
/// logged and skipped; it is an error if none remain.
pub fn ingest(dir: &Path, eeg_rate: f64, emg_rate: f64) -> Result<Vec<TrialBundle>> {
    let entries = fs::read_dir(dir).map_err(|e| io_err(dir, e))?;
    let mut dirs: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("trial_")))
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(CliError::Data(format!("no trials found in {}", dir.display())));
    }
    let mut trials = Vec::with_capacity(dirs.len());
    let mut failures = Vec::new();
    for d in &dirs {
        match read_trial(d, eeg_rate, emg_rate) {
            Ok(t) => trials.push(t),
            Err(e) => {
                log::warn!("skipping {}: {e}", d.display());
                failures.push(e.to_string());
            }
        }
    }
    if trials.is_empty() {
        return Err(CliError::Data(format!(
            "all {} trials in {} are malformed; first error: {}",
            dirs.len(),
            dir.display(),
            failures[0]
        )));
    }
    Ok(trials)
}
