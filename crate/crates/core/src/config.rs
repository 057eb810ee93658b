//! Declarative run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rewards::ShapingScheme;
use crate::sandbox::{prefix_config_error, PopulationSpec};
use crate::trainer::{TrainConfig, TrainerSettings};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "CODA_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    /// Samples per task written to `eval.jsonl`.
    pub k: usize,
    /// Fixed budgets for the accuracy-vs-budget curve.
    pub budgets: Vec<u64>,
    /// Monte-Carlo draws per curve point.
    pub draws: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            k: 8,
            budgets: vec![0, 64, 250, 500, 1000, 2000, 4000, 8000, 16_384],
            draws: 100_000,
        }
    }
}

impl EvalSettings {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("k", "must be >= 1"));
        }
        if self.budgets.is_empty() {
            return Err(Error::config("budgets", "need at least one budget"));
        }
        if self.draws == 0 {
            return Err(Error::config("draws", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub scheme: ShapingScheme<f64>,
    pub population: PopulationSpec,
    pub trainer: TrainerSettings,
    pub eval: EvalSettings,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scheme: ShapingScheme::default(),
            population: PopulationSpec::default(),
            trainer: TrainerSettings::default(),
            eval: EvalSettings::default(),
            output_dir: PathBuf::from("run"),
        }
    }
}

impl RunConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let path = if path == "." { "<root>".to_string() } else { path };
            Error::config(path, e.into_inner().to_string())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        Self::from_json_str(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        self.eval
            .validate()
            .map_err(|e| prefix_config_error(e, "eval"))?;
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::config("output_dir", "must not be empty"));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            scheme: self.scheme.clone(),
            population: self.population.clone(),
            trainer: self.trainer.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedSource {
    Config,
    Env,
}

/// Applies the `CODA_SEED` override; `env_value` is the variable's raw value.
pub fn resolve_seed(config_seed: u64, env_value: Option<&str>) -> Result<(u64, SeedSource)> {
    match env_value {
        None => Ok((config_seed, SeedSource::Config)),
        Some(raw) => raw
            .trim()
            .parse()
            .map(|s| (s, SeedSource::Env))
            .map_err(|_| Error::config(SEED_ENV, format!("`{raw}` is not an unsigned integer"))),
    }
}
