//! Experiment configuration: model, data, optimizer and seed in one JSON
//! document. The resolved config is echoed into every result file and its
//! SHA-256 digest identifies the run.

use std::path::Path;

use hypca::{AdamConfig, ModelConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};
use crate::synth::SynthSpec;

/// Environment variable that overrides the config seed. `--seed` on the
/// command line takes precedence over it.
pub const SEED_ENV: &str = "HYPCA_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Batch size used for validation and test forward passes.
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            adam: AdamConfig::default(),
            eval_batch_size: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Drives parameter init, batch order and dropout masks. The dataset has
    /// its own seed in `data`.
    pub seed: u64,
    pub model: ModelConfig,
    pub data: SynthSpec,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            data: SynthSpec::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        let bad = |msg: String| Err(HarnessError::Config(msg));
        if self.model.modalities != self.data.modalities {
            return bad(format!(
                "model has {} modalities, data has {}",
                self.model.modalities, self.data.modalities
            ));
        }
        if self.model.in_channels != self.data.channels {
            return bad(format!(
                "model expects {} input channels, data has {}",
                self.model.in_channels, self.data.channels
            ));
        }
        if self.model.classes.len() != 1 || self.model.classes[0] != self.data.classes {
            return bad(format!(
                "model heads {:?} do not match the {}-class synthetic task",
                self.model.classes, self.data.classes
            ));
        }
        if self.data.image_size % self.model.stem_downsample != 0 {
            return bad(format!(
                "image size {} is not divisible by the stem downsample {}",
                self.data.image_size, self.model.stem_downsample
            ));
        }
        if self.train.batch_size == 0 || self.train.eval_batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        let a = self.train.adam;
        if !(a.lr > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return bad(format!("invalid optimizer settings {a:?}"));
        }
        Ok(())
    }

    /// Applies the seed override order: `flag`, then the environment, then
    /// the file.
    pub fn resolve_seed(&mut self, flag: Option<u64>) -> Result<()> {
        if let Some(s) = flag {
            self.seed = s;
        } else if let Some(s) = seed_from_env()? {
            self.seed = s;
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

pub fn seed_from_env() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| HarnessError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}
