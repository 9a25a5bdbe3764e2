//! Training configuration: a flat TOML key-value file where every key has a
//! default and unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::LossWeights;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// 1 = colorization pretraining, 2 = counting fine-tune.
    pub stage: u8,
    /// Defaults to 1e-4 for stage 1 and 1e-5 for stage 2 when unset.
    pub learning_rate: Option<f64>,
    pub batch_size: usize,
    /// `adam` or `sgd-momentum`.
    pub optimizer: String,
    /// Defaults to 20 epochs for stage 1 and 50 for stage 2 when unset.
    pub epochs: Option<usize>,
    pub seed: u64,
    /// Colorization weight α.
    pub alpha: f64,
    /// Cycle-consistency weight β.
    pub beta: f64,
    /// Texture weight γ.
    pub gamma: f64,
    /// Classification weight λ.
    pub lambda: f64,
    /// Multiplier on both adversarial terms (1 recovers the plain total).
    pub gan_weight: f64,
    /// Fraction of the labeled corpus used in stage 2.
    pub subset_fraction: f64,
    /// Images are resized to this square side for training.
    pub train_size: usize,
    /// Number of crowd-level groups m.
    pub groups: u8,
    /// Chroma quantization grid spacing.
    pub grid_spacing: f64,
    /// Keep the transferred frontend fixed during stage 2.
    pub freeze_frontend: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: 1,
            learning_rate: None,
            batch_size: 25,
            optimizer: "adam".to_string(),
            epochs: None,
            seed: 7,
            alpha: 1.0,
            beta: 10.0,
            gamma: 1e-4,
            lambda: 0.1,
            gan_weight: 1.0,
            subset_fraction: 1.0,
            train_size: 128,
            groups: 3,
            grid_spacing: 10.0,
            freeze_frontend: false,
        }
    }
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self =
            toml::from_str(&text).map_err(|e| Error::corrupt(path, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage != 1 && self.stage != 2 {
            return Err(Error::invalid(format!("stage must be 1 or 2, got {}", self.stage)));
        }
        if let Some(lr) = self.learning_rate {
            if !(lr > 0.0) {
                return Err(Error::invalid(format!("learning_rate must be > 0, got {lr}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if !(self.subset_fraction > 0.0 && self.subset_fraction <= 1.0) {
            return Err(Error::invalid(format!(
                "subset_fraction must be in (0, 1], got {}",
                self.subset_fraction
            )));
        }
        if self.optimizer != "adam" && self.optimizer != "sgd-momentum" {
            return Err(Error::invalid(format!(
                "optimizer must be \"adam\" or \"sgd-momentum\", got {:?}",
                self.optimizer
            )));
        }
        if self.train_size < 32 || self.train_size % 32 != 0 {
            return Err(Error::invalid(format!(
                "train_size must be a positive multiple of 32, got {}",
                self.train_size
            )));
        }
        if self.groups < 2 {
            return Err(Error::invalid("groups must be >= 2"));
        }
        if !(self.grid_spacing > 0.0) {
            return Err(Error::invalid("grid_spacing must be > 0"));
        }
        if self.gan_weight < 0.0 {
            return Err(Error::invalid("gan_weight must be >= 0"));
        }
        self.weights()?;
        Ok(())
    }

    /// Resolved learning rate (stage-dependent default).
    pub fn lr(&self) -> f64 {
        self.learning_rate.unwrap_or(if self.stage == 1 { 1e-4 } else { 1e-5 })
    }

    /// Resolved epoch count (stage-dependent default).
    pub fn epoch_count(&self) -> usize {
        self.epochs.unwrap_or(if self.stage == 1 { 20 } else { 50 })
    }

    pub fn weights(&self) -> Result<LossWeights> {
        let w = LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            lambda: self.lambda,
        };
        w.validate()?;
        Ok(w)
    }

    /// Stable hash of the full configuration, recorded in checkpoints so a
    /// resume can verify it continues the same run.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
