//! Run configuration: one JSON file, with command-line flags applied on top.

use std::path::Path;

use serde::{Deserialize, Serialize};
use slu_core::baseline::BaselineConfig;
use slu_core::model::{ModelConfig, ModelKind};
use slu_core::pretrain::{MaskingPolicy, PretrainConfig};
use slu_core::train_eval::{AdamConfig, TrainConfig};
use slu_core::transformer::TransformerConfig;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub max_steps: Option<usize>,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        let d = PretrainConfig::default();
        Self {
            epochs: d.epochs,
            batch_size: d.batch_size,
            max_steps: d.max_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: Option<usize>,
    pub target_train_accuracy: Option<f64>,
}

impl Default for FinetuneSettings {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            epochs: d.epochs,
            batch_size: d.batch_size,
            patience: d.patience,
            target_train_accuracy: d.target_train_accuracy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Vocabulary and class counts are filled in from the data.
    pub model: ModelConfig,
    /// Defaults depend on the model kind when absent.
    pub optimizer: Option<AdamConfig>,
    pub masking: MaskingPolicy,
    pub pretrain: PretrainSettings,
    pub finetune: FinetuneSettings,
    /// Encoded length including the leading CLS.
    pub max_len: usize,
    /// Phones seen fewer times map to UNK.
    pub min_count: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::Transformer(TransformerConfig::default()),
            optimizer: None,
            masking: MaskingPolicy::default(),
            pretrain: PretrainSettings::default(),
            finetune: FinetuneSettings::default(),
            max_len: 128,
            min_count: 1,
            seed: 0,
        }
    }
}

/// Flags that win over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub model: Option<ModelKind>,
}

/// Which training phase `--epochs` applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Finetune,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = slu_core::fsio::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| CliError::Config {
            path: path.display().to_string(),
            msg: e.to_string(),
        })
    }

    pub fn apply(&mut self, o: &Overrides, phase: Phase) {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(epochs) = o.epochs {
            match phase {
                Phase::Pretrain => self.pretrain.epochs = epochs,
                Phase::Finetune => self.finetune.epochs = epochs,
            }
        }
        if let Some(kind) = o.model {
            if kind != self.model.kind() {
                self.model = match kind {
                    ModelKind::Transformer => ModelConfig::Transformer(TransformerConfig::default()),
                    ModelKind::Baseline => ModelConfig::Baseline(BaselineConfig::default()),
                };
            }
        }
        if let Some(lr) = o.lr {
            let mut opt = self.optimizer(self.model.kind());
            opt.lr = lr;
            self.optimizer = Some(opt);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_len < 2 {
            return Err(CliError::field("max_len", "must be at least 2"));
        }
        if self.min_count == 0 {
            return Err(CliError::field("min_count", "must be positive"));
        }
        if let Some(opt) = &self.optimizer {
            opt.validate()?;
        }
        self.masking.validate()?;
        self.train_config().validate()?;
        if self.pretrain.batch_size == 0 {
            return Err(CliError::field("pretrain.batch_size", "must be positive"));
        }
        Ok(())
    }

    /// Optimizer for `kind`, which may differ from the configured model when
    /// fine-tuning from a checkpoint.
    pub fn optimizer(&self, kind: ModelKind) -> AdamConfig {
        self.optimizer.clone().unwrap_or_else(|| AdamConfig::for_model(kind))
    }

    pub fn train_config(&self) -> TrainConfig {
        let f = &self.finetune;
        TrainConfig {
            epochs: f.epochs,
            batch_size: f.batch_size,
            patience: f.patience,
            target_train_accuracy: f.target_train_accuracy,
            seed: self.seed,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        let p = &self.pretrain;
        PretrainConfig {
            epochs: p.epochs,
            batch_size: p.batch_size,
            max_steps: p.max_steps,
            seed: self.seed,
        }
    }
}
