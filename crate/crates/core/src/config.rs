//! Experiment configuration: one TOML file with a section per module.
//!
//! Precedence, lowest first: built-in defaults, the config file, the
//! `CDDSA_SEED` environment variable (training and data seed), then
//! command-line flags.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::GeneratorConfig;
use crate::error::{CddsaError, Result};
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

pub const SEED_ENV: &str = "CDDSA_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Pixel spacing `(row, col)` used for surface distances.
    pub spacing: (f64, f64),
    /// Qualitative panels written per fold.
    pub sample_panels: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { spacing: (1.0, 1.0), sample_panels: 4 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: GeneratorConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CddsaError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CddsaError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            CddsaError::Config(m) => CddsaError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| CddsaError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        let (r, c) = self.eval.spacing;
        if !(r > 0.0 && c > 0.0 && r.is_finite() && c.is_finite()) {
            return Err(CddsaError::Config("eval.spacing entries must be positive".into()));
        }
        if self.model.in_channels != self.data.channels {
            return Err(CddsaError::Config(format!(
                "model.in_channels = {} but data.channels = {}",
                self.model.in_channels, self.data.channels
            )));
        }
        Ok(())
    }

    /// Applies `CDDSA_SEED` when `value` is set.
    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            let seed = v.trim().parse::<u64>().map_err(|_| CddsaError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
            self.train.seed = seed;
            self.data.seed = seed;
        }
        Ok(())
    }
}
