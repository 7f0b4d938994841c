use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{CliError, Result};
use crate::copilot::{CriticConfig, ThresholdTable};
use crate::kinematics::{IkConfig, WorkspaceBox};
use crate::model::ModelConfig;
use crate::signals::WindowSpec;
use crate::train::{AdamConfig, PreprocessConfig, SyntheticTrialSpec, TrainConfig, EMG_CHANNELS};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub windows: Vec<usize>,
    pub delays_ms: Vec<u32>,
    /// Window used while sweeping delays, and delay used while sweeping windows.
    pub base_window: usize,
    pub base_delay_ms: u32,
    pub epochs: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            windows: vec![50, 100, 200, 250, 500, 750, 1000],
            delays_ms: vec![100, 200, 300, 400, 500, 600, 700],
            base_window: 100,
            base_delay_ms: 100,
            epochs: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CopilotConfig {
    pub thresholds: ThresholdTable,
    /// Plain-text rule table; the built-in table when absent.
    pub rules_file: Option<PathBuf>,
    pub critic: CriticConfig,
    /// Threshold scales evaluated by `filter`.
    pub scales: Vec<f64>,
}

impl Default for CopilotConfig {
    fn default() -> Self {
        Self {
            thresholds: ThresholdTable::default(),
            rules_file: None,
            critic: CriticConfig::default(),
            scales: (0..=16).map(|i| i as f64 / 10.0).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmConfig {
    /// Arm description file; the bundled Panda model when absent.
    pub arm_file: Option<PathBuf>,
    pub workspace: WorkspaceBox,
    pub ik: IkConfig,
    pub rate_hz: f64,
    /// Test trial to export; the first test trial when absent.
    pub trial: Option<String>,
}

impl Default for ArmConfig {
    fn default() -> Self {
        Self {
            arm_file: None,
            workspace: WorkspaceBox::default(),
            ik: IkConfig::default(),
            rate_hz: 100.0,
            trial: None,
        }
    }
}

/// Everything one run needs, as a single JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub data_dir: PathBuf,
    pub output_dir: PathBuf,
    /// Seeds data generation and the train/val/test split.
    pub seed: u64,
    /// Trials written by `generate`.
    pub trials: usize,
    pub synthetic: SyntheticTrialSpec,
    pub preprocess: PreprocessConfig,
    pub window: WindowSpec,
    pub fusion: bool,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub copilot: CopilotConfig,
    pub arm: ArmConfig,
    pub sweep: SweepConfig,
}

/// Compact decoder sized for desk-scale runs on the synthetic set.
pub fn compact_model(window: usize, emg_channels: usize) -> ModelConfig {
    ModelConfig {
        in_channels_emg: emg_channels,
        window_samples: window,
        large_kernel: 33,
        large_features: 2,
        branch_kernels: vec![5, 9],
        branch_features: 2,
        pool_k: 5,
        pool_s: 5,
        se_reduction: 8,
        embed_dim: 32,
        heads: 4,
        head_dim: 8,
        dropout: 0.1,
        ..ModelConfig::default()
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            data_dir: "data".into(),
            output_dir: "out".into(),
            seed: 7,
            trials: 20,
            synthetic: SyntheticTrialSpec::default(),
            preprocess: PreprocessConfig::default(),
            window: WindowSpec {
                window_samples: 100,
                step_samples: 20,
                delay_ms: 100,
                rate_hz: 500.0,
            },
            fusion: true,
            model: compact_model(100, EMG_CHANNELS),
            train: TrainConfig {
                epochs: 12,
                batch_size: 64,
                seed: 0,
                adam: AdamConfig {
                    learning_rate: 3e-3,
                    ..AdamConfig::default()
                },
                patience: Some(5),
            },
            copilot: CopilotConfig::default(),
            arm: ArmConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::from_value(serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?)
    }

    fn from_value(v: Value) -> Result<Self> {
        serde_json::from_value(v).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Applies `key value` overrides. Keys are dotted paths into the JSON
    /// document (`train.epochs`); values parse as JSON, falling back to a
    /// string.
    pub fn with_overrides(self, pairs: &[(String, String)]) -> Result<Self> {
        let mut doc = serde_json::to_value(&self).expect("config serializes");
        for (key, raw) in pairs {
            let mut node = &mut doc;
            for part in key.split('.') {
                node = node
                    .as_object_mut()
                    .and_then(|m| m.get_mut(part))
                    .ok_or_else(|| CliError::Config(format!("unknown config key `{key}`")))?;
            }
            *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
        }
        Self::from_value(doc)
    }

    /// Checks every section before any stage runs.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.version != CONFIG_VERSION {
            return bad(format!("config version {} is not supported (expected {CONFIG_VERSION})", self.version));
        }
        if self.trials == 0 {
            return bad("trials must be positive".into());
        }
        self.window.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.window.rate_hz != self.synthetic.rate_eeg {
            return bad(format!(
                "window.rate_hz {} differs from the EEG rate {}",
                self.window.rate_hz, self.synthetic.rate_eeg
            ));
        }
        self.model.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.model.window_samples != self.window.window_samples {
            return bad(format!(
                "model.window_samples {} must equal window.window_samples {}",
                self.model.window_samples, self.window.window_samples
            ));
        }
        let emg = if self.fusion { EMG_CHANNELS } else { 0 };
        if self.model.in_channels_emg != emg {
            return bad(format!(
                "model.in_channels_emg must be {emg} when fusion is {}",
                self.fusion
            ));
        }
        if self.model.out_dim != 6 {
            return bad("model.out_dim must be 6; the classifier is derived from it".into());
        }
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.copilot.thresholds.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.copilot.scales.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return bad("copilot.scales must be finite and non-negative".into());
        }
        self.arm.workspace.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if !(self.arm.rate_hz > 0.0 && self.arm.rate_hz.is_finite()) {
            return bad("arm.rate_hz must be positive".into());
        }
        if self.sweep.windows.iter().any(|w| !WindowSpec::WINDOW_RANGE.contains(w)) {
            return bad(format!("sweep windows must lie in {:?}", WindowSpec::WINDOW_RANGE));
        }
        if self.sweep.epochs == 0 {
            return bad("sweep.epochs must be positive".into());
        }
        Ok(())
    }
}
