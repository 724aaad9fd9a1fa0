//! TOML run configuration.
//!
//! ```toml
//! seed = 7
//!
//! [model]            # ModelConfig; [model.head] holds HeadConfig
//! [loss]             # LossConfig
//! [weights]          # LossWeights
//! [train]            # TrainConfig
//! [data]             # samples_per_task, tasks
//! [paths]            # out
//! [augmentation]     # reserved, must stay empty
//! ```
//!
//! Every table is optional and every key has a default. Unknown keys are
//! rejected with the offending name in the message.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{generate_dataset, DataConfig, Dataset};
use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossWeights};
use crate::model::ModelConfig;
use crate::task::Task;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub samples_per_task: usize,
    pub tasks: Vec<Task>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            samples_per_task: 64,
            tasks: Task::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub out: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            out: PathBuf::from("runs/default"),
        }
    }
}

/// Placeholder for image augmentation settings; no keys are accepted yet.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationSection {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub weights: LossWeights,
    pub train: TrainConfig,
    pub data: DataSection,
    pub paths: PathsSection,
    pub augmentation: AugmentationSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            weights: LossWeights::default(),
            train: TrainConfig::default(),
            data: DataSection::default(),
            paths: PathsSection::default(),
            augmentation: AugmentationSection::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.weights.validate()?;
        self.train.validate()?;
        if self.data.samples_per_task == 0 {
            return Err(Error::Config(
                "data.samples_per_task must be positive".into(),
            ));
        }
        if self.data.tasks.is_empty() {
            return Err(Error::Config("data.tasks must not be empty".into()));
        }
        let mut seen = self.data.tasks.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.data.tasks.len() {
            return Err(Error::Config("data.tasks lists a task twice".into()));
        }
        if self.train.batch_size % self.data.tasks.len() != 0 {
            return Err(Error::Config(format!(
                "train.batch_size {} is not divisible by the {} active tasks",
                self.train.batch_size,
                self.data.tasks.len()
            )));
        }
        Ok(())
    }

    pub fn data_config(&self) -> DataConfig {
        DataConfig {
            image_height: self.model.image_height,
            image_width: self.model.image_width,
            head: self.model.head,
        }
    }

    /// One synthetic dataset per active task, all drawn from `seed`.
    pub fn datasets(&self, seed: u64) -> Result<Vec<Dataset>> {
        let cfg = self.data_config();
        self.data
            .tasks
            .iter()
            .map(|&t| generate_dataset(t, self.data.samples_per_task, seed, &cfg))
            .collect()
    }

    pub fn digest(&self) -> [u8; 32] {
        model_digest(&self.model)
    }
}

/// SHA-256 of the model section's canonical JSON. Two configs with the same
/// digest build registries with identical names and shapes.
pub fn model_digest(cfg: &ModelConfig) -> [u8; 32] {
    let json = serde_json::to_vec(cfg).expect("model config serializes");
    Sha256::digest(&json).into()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
