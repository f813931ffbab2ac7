use std::path::{Path, PathBuf};

use codyra_core::analysis::SweepGrid;
use codyra_core::encoder::ModelConfig;
use codyra_core::synth::DataConfig;
use codyra_core::trainer::{PretrainConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Write per-task amplification factors after `run`.
    #[serde(default = "yes")]
    pub amplification: bool,
    /// Write rank-allocation tallies after `run`.
    #[serde(default = "yes")]
    pub allocation: bool,
    /// Singular directions used for amplification; the adapter's active rank when absent.
    #[serde(default)]
    pub amplification_rank: Option<usize>,
    #[serde(default)]
    pub sweep: SweepGrid,
}

fn yes() -> bool {
    true
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            amplification: true,
            allocation: true,
            amplification_rank: None,
            sweep: SweepGrid::default(),
        }
    }
}

/// Everything a CLI invocation needs besides its subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub global_seed: u64,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            data: DataConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            analysis: AnalysisConfig::default(),
            output_dir: default_output_dir(),
            global_seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config is always serializable")
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(path.to_path_buf(), e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |e: String| CliError::Config(e);
        self.model.validate().map_err(|e| bad(e.to_string()))?;
        self.train.validate().map_err(|e| bad(e.to_string()))?;
        self.pretrain.optimizer.validate().map_err(bad)?;
        if self.pretrain.batch_size < 2 {
            return Err(bad("pretrain batch size must be at least 2".into()));
        }
        if self.data.stream.is_empty() {
            return Err(bad("data.stream must list at least one domain".into()));
        }
        Ok(())
    }
}
