//! Run configuration: one TOML tree merging every component's settings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::FeatureConfig;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::mmg::MmgConfig;
use crate::synthdata::CohortConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub k_folds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_stage1: 30,
            epochs_stage2: 30,
            batch_size: 8,
            lr: 1e-3,
            seed: 0,
            k_folds: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs_stage1 == 0 || self.epochs_stage2 == 0 || self.batch_size == 0 {
            return Err(Error::Config("epoch counts and batch_size must be positive".into()));
        }
        if self.k_folds < 2 {
            return Err(Error::Config(format!("k_folds must be at least 2, got {}", self.k_folds)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    pub use_mmg: bool,
    pub use_tcaf: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            use_mmg: true,
            use_tcaf: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub cohort: CohortConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub mmg: MmgConfig,
    pub model: FeatureConfig,
    pub ablation: AblationFlags,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("out"),
            cohort: CohortConfig::default(),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            mmg: MmgConfig::default(),
            model: FeatureConfig::default(),
            ablation: AblationFlags::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.cohort.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        self.mmg.validate()?;
        self.model.validate()?;
        if self.train.k_folds > self.cohort.n_subjects {
            return Err(Error::Config(format!(
                "k_folds = {} exceeds n_subjects = {}",
                self.train.k_folds, self.cohort.n_subjects
            )));
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Canonical serialisation: every key, in declaration order.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// SHA-256 of the canonical serialisation, hex encoded. The output
    /// directory is left out so identical runs in different places agree.
    pub fn hash(&self) -> String {
        let mut content = self.clone();
        content.output_dir = PathBuf::new();
        hex::encode(Sha256::digest(content.to_toml().as_bytes()))
    }

    /// Applies a `--seed` override to both the cohort and training.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.cohort.seed = seed;
        self.train.seed = seed;
        self
    }
}
