use std::fs;
use std::path::Path;

use mome::arch::MomeConfig;
use mome::data::GenConfig;
use mome::eval::Metric;
use mome::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const LOCK_FILE: &str = "config.lock";

/// Evaluation, attribution and comparison settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_boot: usize,
    pub seed: u64,
    /// Positive call iff `score > threshold`.
    pub threshold: f64,
    /// Tag keys that get a subgroup report.
    pub subgroups: Vec<String>,
    /// Number of evenly spaced decision-curve thresholds in (0, 1).
    pub decision_points: usize,
    /// Metrics compared by `compare` for two reports.
    pub compare_metrics: Vec<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_boot: 1000,
            seed: 0,
            threshold: 0.5,
            subgroups: ["site", "field_strength", "age_bin", "birads"]
                .map(String::from)
                .to_vec(),
            decision_points: 99,
            compare_metrics: ["auroc", "auprc", "sensitivity", "specificity", "f1", "mcc"]
                .map(String::from)
                .to_vec(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.n_boot < 2 {
            return Err(CliError::Config(format!("eval.n_boot {} must be >= 2", self.n_boot)));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(CliError::Config(format!(
                "eval.threshold {} outside [0, 1]",
                self.threshold
            )));
        }
        if self.decision_points < 1 {
            return Err(CliError::Config("eval.decision_points must be >= 1".into()));
        }
        self.metrics()?;
        Ok(())
    }

    pub fn metrics(&self) -> Result<Vec<Metric>, CliError> {
        self.compare_metrics
            .iter()
            .map(|n| Metric::from_name(n).ok_or_else(|| CliError::Config(format!("unknown metric {n:?}"))))
            .collect()
    }

    pub fn decision_thresholds(&self) -> Vec<f64> {
        let k = self.decision_points;
        (1..=k).map(|i| i as f64 / (k + 1) as f64).collect()
    }
}

/// Everything a command may need, parsed and validated before any work.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: MomeConfig,
    pub train: TrainConfig,
    pub data: GenConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
                Self::parse(&text)
            }
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let config = |e: mome::MomeError| CliError::Config(e.to_string());
        self.model.validate().map_err(config)?;
        self.train.validate().map_err(config)?;
        self.data.validate().map_err(config)?;
        self.eval.validate()
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(format!("cannot serialize config: {e}")))
    }

    /// Create `dir` and write the effective configuration into it.
    pub fn lock_into(&self, dir: &Path) -> Result<(), CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        fs::write(&path, self.to_toml()?).map_err(|e| CliError::io(&path, e))
    }
}
