use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PretrainMethod;
use crate::numerics::{AdamWConfig, Precision, ScheduleConfig};
use crate::objectives::{ContrastiveConfig, MasdConfig};

/// Epochs, batch size and learning-rate schedule of one training stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of all steps spent in linear warmup.
    #[serde(default = "default_warmup")]
    pub warmup_frac: f64,
}

fn default_warmup() -> f64 {
    0.1
}

impl StageConfig {
    pub fn schedule(&self, steps_per_epoch: usize) -> ScheduleConfig {
        let total = self.epochs * steps_per_epoch;
        ScheduleConfig {
            peak_lr: self.lr,
            warmup_steps: (self.warmup_frac * total as f64).round() as usize,
            total_steps: total,
        }
    }

    fn validate(&self, field: &str) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config(format!("`{field}.batch_size` must be positive")));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("`{field}.lr` must be finite and >= 0")));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::Config(format!("`{field}.warmup_frac` must be in [0, 1]")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub precision: Precision,
    pub hidden: usize,
    pub embed_dim: usize,
    pub pretrain_method: PretrainMethod,
    pub pretrain: StageConfig,
    pub probe: StageConfig,
    /// Used by fine-tuning and by MASD.
    pub finetune: StageConfig,
    pub optimizer: AdamWConfig,
    pub contrastive: ContrastiveConfig,
    pub masd: MasdConfig,
    pub wiseft_alpha: f64,
    /// Default MAE mask ratio.
    pub mask_ratio: f64,
    /// Per-modality overrides of `mask_ratio`, by modality name.
    pub mask_ratios: BTreeMap<String, f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Precision::F32,
            hidden: 64,
            embed_dim: 32,
            pretrain_method: PretrainMethod::Contrastive,
            pretrain: StageConfig {
                epochs: 30,
                batch_size: 64,
                lr: 8e-4,
                warmup_frac: 0.1,
            },
            probe: StageConfig {
                epochs: 20,
                batch_size: 64,
                lr: 1e-2,
                warmup_frac: 0.1,
            },
            finetune: StageConfig {
                epochs: 20,
                batch_size: 64,
                lr: 1e-4,
                warmup_frac: 0.1,
            },
            optimizer: AdamWConfig::default(),
            contrastive: ContrastiveConfig::default(),
            masd: MasdConfig::default(),
            wiseft_alpha: 0.75,
            mask_ratio: 0.8,
            mask_ratios: BTreeMap::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.embed_dim == 0 {
            return Err(Error::Config("`hidden` and `embed_dim` must be positive".into()));
        }
        self.pretrain.validate("pretrain")?;
        self.probe.validate("probe")?;
        self.finetune.validate("finetune")?;
        if !(0.0..=1.0).contains(&self.wiseft_alpha) {
            return Err(Error::Config(format!("`wiseft_alpha` {} outside [0, 1]", self.wiseft_alpha)));
        }
        if !(self.masd.lambda >= 0.0 && self.masd.lambda.is_finite()) {
            return Err(Error::Config("`masd.lambda` must be finite and >= 0".into()));
        }
        if self.masd.temperature.is_nan() || self.masd.temperature <= 0.0 {
            return Err(Error::Config("`masd.temperature` must be > 0".into()));
        }
        if self.contrastive.temperature.is_nan() || self.contrastive.temperature <= 0.0 {
            return Err(Error::Config("`contrastive.temperature` must be > 0".into()));
        }
        for (name, &r) in std::iter::once((&"mask_ratio".to_string(), &self.mask_ratio)).chain(&self.mask_ratios) {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!("mask ratio for `{name}` must be in [0, 1)")));
            }
        }
        Ok(())
    }

    pub fn mask_ratio_for(&self, modality: &str) -> f64 {
        self.mask_ratios.get(modality).copied().unwrap_or(self.mask_ratio)
    }
}
