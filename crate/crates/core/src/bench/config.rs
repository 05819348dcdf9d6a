//! One TOML file drives every benchmark.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::cost::CostModelParams;
use crate::bench::data::DataConfig;
use crate::bench::latency::LatencyConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::curriculum::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    /// Architecture for the latency run when no checkpoints are given.
    pub model: ModelConfig,
    /// Optional trained weights for the latency run, relative to the config
    /// file. Both or neither.
    pub rxt_checkpoint: Option<PathBuf>,
    pub baseline_checkpoint: Option<PathBuf>,
    pub latency: LatencyConfig,
    pub cost: CostModelParams,
    /// Dataset and training used by the evaluation run, once per seed.
    pub data: DataConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            rxt_checkpoint: None,
            baseline_checkpoint: None,
            latency: LatencyConfig::default(),
            cost: CostModelParams::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            seeds: vec![0, 1, 2],
        }
    }
}

impl BenchConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path` and resolves checkpoint paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.rxt_checkpoint, &mut cfg.baseline_checkpoint].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.latency.validate()?;
        self.train.validate()?;
        if self.rxt_checkpoint.is_some() != self.baseline_checkpoint.is_some() {
            return Err(Error::Config("give both rxt_checkpoint and baseline_checkpoint, or neither".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        Ok(())
    }
}
