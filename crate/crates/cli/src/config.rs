use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use spotlight_core::diffcore::AdamWConfig;
use spotlight_core::objectives::LossWeights;
use spotlight_core::styleenc::StyleEncoderConfig;
use spotlight_core::synthlab::{ModelConfig, Mode, SynthSpec, TrainConfig};

use crate::UsageError;

/// Everything `spotlight train` needs, as one JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: SynthSpec,
    pub encoder: StyleEncoderConfig,
    pub decoder_blocks: usize,
    pub weights: LossWeights,
    pub optimizer: AdamWConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    pub mode: Mode,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            data: SynthSpec::default(),
            encoder: StyleEncoderConfig::default(),
            decoder_blocks: ModelConfig::default().decoder_blocks,
            weights: train.weights,
            optimizer: train.optimizer,
            steps: train.steps,
            batch_size: train.batch_size,
            eval_every: train.eval_every,
            mode: Mode::Full,
            seed: train.seed,
            out: PathBuf::from("runs/train"),
        }
    }
}

impl RunConfig {
    /// Parses `path`; errors carry the JSON key path of the offending field.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let config: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            UsageError(format!("config error at `{key}`: {}", e.inner()))
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("data", self.data.validate()),
            ("encoder", self.encoder.validate()),
            ("weights", self.weights.validate()),
            ("train", self.train_config().validate()),
            ("model", self.model_config().validate()),
        ];
        for (key, r) in checks {
            r.map_err(|e| UsageError(format!("config error at `{key}`: {e}")))?;
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            decoder_blocks: self.decoder_blocks,
            ..ModelConfig::default()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            eval_every: self.eval_every,
            optimizer: self.optimizer.clone(),
            weights: self.weights,
            seed: self.seed,
        }
    }
}

/// `SPOTLIGHT_SEED`, when set, replaces any configured seed.
pub fn seed_override() -> Result<Option<u64>> {
    match std::env::var("SPOTLIGHT_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| UsageError(format!("SPOTLIGHT_SEED must be an unsigned integer, got `{v}`")).into()),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(e).context("reading SPOTLIGHT_SEED"),
    }
}
