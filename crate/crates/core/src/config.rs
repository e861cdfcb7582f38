//! One TOML file for a whole run: `[gen]`, `[model]`, `[train]` and `[experiment]`
//! tables whose keys are the field names of the corresponding config structs.

use crate::datagen::GenConfig;
use crate::encoders::ModelConfig;
use crate::error::{invalid_config, Result};
use crate::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Independent training runs per setting; run `s` uses seed `train.seed + s`.
    pub seeds: usize,
    pub lambdas: Vec<f64>,
    pub jitter_sigmas: Vec<f64>,
    /// Fresh videos (same archetypes, ids past the corpus) added to the test split.
    pub extra_eval_videos: usize,
    /// Epochs of readout training on a frozen video tower for the branch ablations.
    pub probe_epochs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: 3,
            lambdas: vec![0.0, 0.5, 1.0, 1.5, 2.0],
            jitter_sigmas: vec![0.0, 0.02, 0.05, 0.1, 0.15, 0.2],
            extra_eval_videos: 0,
            probe_epochs: 6,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub gen: GenConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub experiment: ExperimentConfig,
}

impl RunConfig {
    /// Parses and validates the whole configuration.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg = Self::parse(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses without cross-table validation.
    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.model.feature_dim != self.gen.feature_dim {
            return Err(invalid_config(format!(
                "model.feature_dim {} differs from gen.feature_dim {}",
                self.model.feature_dim, self.gen.feature_dim
            )));
        }
        if self.model.vocab_size != self.gen.vocab_size {
            return Err(invalid_config(format!(
                "model.vocab_size {} differs from gen.vocab_size {}",
                self.model.vocab_size, self.gen.vocab_size
            )));
        }
        if self.model.count_max < self.gen.events_per_video_range.1 {
            return Err(invalid_config("model.count_max is below the largest event count of the corpus"));
        }
        if self.gen.events_per_video_range.1 > self.model.num_queries {
            return Err(invalid_config("videos may hold more events than the model has queries"));
        }
        if self.experiment.seeds == 0 {
            return Err(invalid_config("experiment.seeds must be at least 1"));
        }
        if self.experiment.lambdas.iter().any(|l| !(*l >= 0.0)) || self.experiment.jitter_sigmas.iter().any(|s| !(*s >= 0.0)) {
            return Err(invalid_config("lambdas and jitter_sigmas must be non-negative"));
        }
        Ok(())
    }
}
