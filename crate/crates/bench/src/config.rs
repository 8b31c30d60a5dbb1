//! Experiment configuration files.

use std::path::Path;

use prefnash::active::{ActiveLearningConfig, ExplorationMode, ScheduleConfig};
use prefnash::preference::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::BenchError;

/// Parsed `run` configuration. Every section except `problem` may be omitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Registry id of the problem.
    pub problem: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub repeat: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<String>,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub learning: LearningConfig,
    /// Problem-specific parameters, checked by the problem builder.
    #[serde(default)]
    pub params: toml::Table,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningConfig {
    pub m0: usize,
    pub exploration: ExplorationMode,
    /// Learn surrogate coupling matrices; a problem may force this off.
    pub coupling: bool,
    pub gne_tol: f64,
    pub gne_max_iter: usize,
    pub parallel: bool,
    /// Retrain from the previous parameters rather than from the initial ones.
    pub warm_start: bool,
    /// Iterations between normalized-RMSE evaluations (LQR problems).
    pub rmse_every: usize,
}

impl Default for LearningConfig {
    fn default() -> Self {
        let al = ActiveLearningConfig::default();
        Self {
            m0: al.m0,
            exploration: al.exploration,
            coupling: al.coupling,
            gne_tol: al.gne_tol,
            gne_max_iter: al.gne_max_iter,
            parallel: al.parallel,
            warm_start: al.warm_start,
            rmse_every: 10,
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, BenchError> {
        let cfg: Self = toml::from_str(text).map_err(|e| BenchError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, BenchError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BenchError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let config_err = |section: &str, e: prefnash::Error| BenchError::Config(format!("[{section}] {e}"));
        self.schedule.validate().map_err(|e| config_err("schedule", e))?;
        self.train.validate().map_err(|e| config_err("train", e))?;
        self.active_learning().validate().map_err(|e| config_err("learning", e))?;
        if self.repeat == 0 {
            return Err(BenchError::Config("repeat must be at least 1".into()));
        }
        if self.learning.rmse_every == 0 {
            return Err(BenchError::Config("[learning] rmse_every must be at least 1".into()));
        }
        Ok(())
    }

    pub fn active_learning(&self) -> ActiveLearningConfig {
        ActiveLearningConfig {
            schedule: self.schedule.clone(),
            train: self.train.clone(),
            m0: self.learning.m0,
            exploration: self.learning.exploration,
            coupling: self.learning.coupling,
            gne_tol: self.learning.gne_tol,
            gne_max_iter: self.learning.gne_max_iter,
            parallel: self.learning.parallel,
            warm_start: self.learning.warm_start,
        }
    }
}

/// Deserializes a problem's parameter table, rejecting unknown keys.
pub fn problem_params<T: serde::de::DeserializeOwned>(problem: &str, table: &toml::Table) -> Result<T, BenchError> {
    T::deserialize(toml::Value::Table(table.clone())).map_err(|e| BenchError::Config(format!("[params] for {problem}: {e}")))
}
