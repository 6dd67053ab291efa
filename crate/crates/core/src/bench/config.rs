//! Experiment configuration: typed sections with key = value pairs,
//! round-trippable so sweep inputs stay reviewable and diffable.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bench::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::tat::{Method, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden_dims: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_dims: vec![8],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSection {
    /// Methods swept by `bench`; `train` uses `train.method` alone.
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    /// Corruption scales evaluated per epoch.
    pub eval_corruption_levels: Vec<f64>,
    /// Noise draws averaged per test point per corruption level.
    pub eval_noise_draws: usize,
    /// CSV output file, relative to the output directory.
    pub csv_path: String,
    /// Optional checkpoint written by `train`, relative to the output directory.
    pub checkpoint_path: Option<String>,
    /// Write measured wall-clock times into the CSV. Off by default so a
    /// rerun with the same config produces a byte-identical file.
    pub emit_timings: bool,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            methods: vec![Method::Std],
            seeds: vec![1],
            eval_corruption_levels: vec![0.25, 0.5],
            eval_noise_draws: 10,
            csv_path: "metrics.csv".into(),
            checkpoint_path: None,
            emit_timings: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub experiment: ExperimentSection,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.train.validate()?;
        if self.experiment.seeds.is_empty() {
            return Err(Error::InvalidArgument("seeds must be nonempty".into()));
        }
        if self.experiment.methods.is_empty() {
            return Err(Error::InvalidArgument("methods must be nonempty".into()));
        }
        if self.experiment.eval_noise_draws == 0 {
            return Err(Error::InvalidArgument(
                "eval_noise_draws must be ≥ 1".into(),
            ));
        }
        if self
            .experiment
            .eval_corruption_levels
            .iter()
            .any(|&c| c < 0.0)
        {
            return Err(Error::InvalidArgument(
                "corruption levels must be ≥ 0".into(),
            ));
        }
        if self.model.hidden_dims.contains(&0) {
            return Err(Error::InvalidArgument(
                "hidden_dims entries must be ≥ 1".into(),
            ));
        }
        Ok(())
    }

    /// Layer widths [n_features, hidden..., classes].
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.dataset.n_features];
        dims.extend_from_slice(&self.model.hidden_dims);
        dims.push(self.dataset.classes);
        dims
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config {
            path: "<inline>".into(),
            detail: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let cfg: ExperimentConfig = toml::from_str(&text).map_err(|e| Error::Config {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path.display().to_string(), e))
    }
}
