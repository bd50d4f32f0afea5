//! One versioned JSON document holding every knob of a run. Loading rejects
//! unknown keys; saving always writes the fully materialized document, so a
//! persisted snapshot plus a seed reproduces the run exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::ModelConfig;
use crate::rollout::GenerationPlan;
use crate::schedule::ScheduleError;
use crate::train::TrainConfig;
use crate::world::{WorldConfig, WorldError};
use crate::{CorrectionParams, Real};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("config parse error")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported config version {0}")]
    Version(u32),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("model config: {0}")]
    Model(String),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("rollout plan: {0}")]
    Plan(String),
    #[error("train config: {0}")]
    Train(String),
    #[error("dataset needs at least one episode")]
    NoEpisodes,
    #[error("episodes of {got} frames cannot fit one training window of {need}")]
    EpisodesTooShort { got: usize, need: usize },
}

/// Anchor-correction intensities, stored raw; derived quantities are
/// recomputed on demand so the snapshot cannot drift from the algebra.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorrectionConfig {
    pub alpha1: Real,
    pub g_max: Real,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        Self {
            alpha1: 0.1,
            g_max: 0.55,
        }
    }
}

impl CorrectionConfig {
    pub fn params(&self) -> Result<CorrectionParams, ScheduleError> {
        CorrectionParams::new(self.alpha1, self.g_max)
    }
}

/// Shape of the dataset the `gen-data` command produces.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub episodes: usize,
    pub frames_per_episode: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            episodes: 24,
            frames_per_episode: 192,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub version: Version,
    pub seed: u64,
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub plan: GenerationPlan,
    pub correction: CorrectionConfig,
}

/// Newtype so a missing `version` key defaults to the current schema while
/// an explicit wrong one is rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Version(pub u32);

impl Default for Version {
    fn default() -> Self {
        Version(CONFIG_VERSION)
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.version.0 != CONFIG_VERSION {
            return Err(ConfigError::Version(self.version.0));
        }
        self.world.validate()?;
        self.model
            .validate()
            .map_err(|e| ConfigError::Model(e.to_string()))?;
        self.plan
            .validate()
            .map_err(|e| ConfigError::Plan(e.to_string()))?;
        self.correction.params()?;
        self.train
            .validate()
            .map_err(|e| ConfigError::Train(e.to_string()))?;
        if self.data.episodes == 0 {
            return Err(ConfigError::NoEpisodes);
        }
        // The widest training window strides the frame lattice at the
        // anchor rate; episodes must fit at least one.
        let window = self.plan.n_condition + self.plan.s_noisy;
        let stride = (self.world.base_fps / self.plan.anchor_fps.max(1)) as usize;
        let need = (window - 1) * stride.max(1) + 1;
        if self.data.frames_per_episode < need {
            return Err(ConfigError::EpisodesTooShort {
                got: self.data.frames_per_episode,
                need,
            });
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let file = File::open(path)?;
        let config: RunConfig = serde_json::from_reader(BufReader::new(file))?;
        config.validate()?;
        Ok(config)
    }

    /// Writes the fully materialized document (every field present).
    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        let file = File::create(path)?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer_pretty(&mut w, self)?;
        writeln!(w)?;
        Ok(())
    }
}
