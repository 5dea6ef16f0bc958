use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::certification::DEFAULT_EPS;
use crate::dataset::DatasetSource;
use crate::error::{Error, Result};
use crate::layers::ModelSpec;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Certification radii.
    pub eps: Vec<f64>,
    pub lipschitz_bound: f64,
    /// Certified test points probed by the attack check.
    pub attack_points: usize,
    pub attack_trials: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            eps: DEFAULT_EPS.to_vec(),
            lipschitz_bound: 1.0,
            attack_points: 100,
            attack_trials: 1000,
        }
    }
}

/// Everything needed for a run: architecture, optimizer, data, evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
    pub dataset: DatasetSource,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Parses and validates without touching the filesystem.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file. Relative dataset paths are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        if let Some(dir) = path.parent() {
            cfg.dataset.resolve(dir);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if !(self.eval.lipschitz_bound > 0.0) || self.eval.eps.iter().any(|&e| !(e >= 0.0)) {
            return Err(Error::InvalidConfig("eval needs lipschitz_bound > 0 and eps ≥ 0".into()));
        }
        Ok(())
    }

    /// Canonical pretty-printed JSON (all defaults spelled out).
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}
