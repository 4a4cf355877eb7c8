//! Run configuration, serialized verbatim into checkpoints and reports.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::EncoderConfig;
use crate::error::{PlusError, Result};
use crate::gpr::{FusionStrategy, DEFAULT_DISTILL_WEIGHT};
use crate::hda::HdaConfig;
use crate::losses::LossConfig;
use crate::metrics::DEFAULT_IOU;
use crate::nn::AttentionConfig;
use crate::phantom::Corruption;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub encoder: EncoderConfig,
    pub hda: HdaConfig,
    /// Without HDA the lesion tokens are mean-pooled and projected directly.
    pub use_hda: bool,
    pub fusion: FusionStrategy,
    pub distill_weight: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 128,
            heads: 4,
            encoder: EncoderConfig::default(),
            hda: HdaConfig::default(),
            use_hda: true,
            fusion: FusionStrategy::Gpr,
            distill_weight: DEFAULT_DISTILL_WEIGHT,
        }
    }
}

impl ModelConfig {
    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig { dim: self.dim, heads: self.heads }
    }

    pub fn validate(&self) -> Result<()> {
        self.attention().validate()?;
        self.encoder.validate()?;
        self.hda.validate()?;
        if self.encoder.dim() != self.dim {
            return Err(PlusError::Config(format!(
                "last encoder width {} must equal the model dim {}",
                self.encoder.dim(),
                self.dim
            )));
        }
        let liver_map = self.encoder.output_dims(self.encoder.liver_grid);
        for g in &self.hda.grids {
            if (0..3).any(|a| g[a] > liver_map[a]) {
                return Err(PlusError::Config(format!("hda grid {g:?} exceeds the liver feature map {liver_map:?}")));
            }
        }
        if !(self.distill_weight >= 0.0 && self.distill_weight.is_finite()) {
            return Err(PlusError::Config("distillation weight must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    /// Patients per mini-batch.
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            base_lr: 1e-4,
            min_lr: 0.0,
            weight_decay: 0.05,
            batch_size: 2,
            epochs: 100,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(PlusError::Config(m.into()));
        if !(self.base_lr > 0.0 && self.min_lr >= 0.0 && self.min_lr <= self.base_lr) {
            return err("learning rates need 0 <= min-lr <= base-lr and base-lr > 0");
        }
        if !(self.weight_decay >= 0.0) {
            return err("weight decay must be >= 0");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return err("batch size and epochs must be positive");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0) {
            return err("adam moments need betas in [0, 1) and eps > 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub init: u64,
    pub data_order: u64,
    /// Seed of the frozen training priors.
    pub train_priors: u64,
    /// Seed of the frozen evaluation priors.
    pub eval_priors: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds { init: 1, data_order: 2, train_priors: 3, eval_priors: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data_dir: Option<String>,
    pub train_split: String,
    pub val_split: String,
    pub model: ModelConfig,
    pub loss: LossConfig,
    /// Derive focal class weights from training-label frequencies when no
    /// explicit weights are given.
    pub auto_class_weights: bool,
    pub optimizer: OptimConfig,
    pub seeds: Seeds,
    pub precision: Precision,
    pub corruption: Corruption,
    /// Voxel spacing the model expects; other spacings are resampled.
    pub spacing: [f64; 3],
    pub decision_threshold: f64,
    pub iou_threshold: f64,
    /// Cap on training cases (0 = all), for quick runs.
    pub max_train_cases: usize,
    pub max_val_cases: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_dir: None,
            train_split: "train".into(),
            val_split: "val".into(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            auto_class_weights: true,
            optimizer: OptimConfig::default(),
            seeds: Seeds::default(),
            precision: Precision::F32,
            corruption: Corruption::default(),
            spacing: [1.0, 1.0, 2.0],
            decision_threshold: 0.5,
            iou_threshold: DEFAULT_IOU,
            max_train_cases: 0,
            max_val_cases: 0,
        }
    }
}

impl RunConfig {
    pub fn classes(&self) -> usize {
        self.loss.classes()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        self.corruption.validate()?;
        if self.loss.non_lesion_class().is_none() {
            return Err(PlusError::Config("class partition needs a non-lesion class".into()));
        }
        if !(self.decision_threshold > 0.0 && self.decision_threshold < 1.0) {
            return Err(PlusError::Config("decision threshold must lie in (0, 1)".into()));
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(PlusError::Config("iou threshold must lie in (0, 1]".into()));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(PlusError::Config("spacing must be positive".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| PlusError::Config(format!("invalid run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PlusError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
