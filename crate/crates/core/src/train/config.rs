use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMix {
    /// Alternate batches drawn purely from one source.
    #[default]
    Alternate,
    /// Shuffle both sources together.
    Interleaved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_image: f64,
    pub lr_text: f64,
    pub lr_caption_head: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epoch indices (0-based) at whose start the learning rate is multiplied by `lr_decay_factor`.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub warmup_iters: u64,
    pub warmup_ratio: f64,
    /// Multiply every base learning rate by `sqrt(batch_size / reference_batch)`.
    pub lr_batch_scaling: bool,
    pub reference_batch: usize,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub max_context: usize,
    pub target_m: usize,
    pub batch_mix: BatchMix,
    /// Stop after this many optimizer steps (smoke runs).
    pub max_steps: Option<u64>,
    /// Keep a checkpoint directory per epoch instead of only the latest.
    pub keep_epoch_checkpoints: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Defaults sized for a single CPU and the synthetic corpus.
    pub fn desk() -> Self {
        Self {
            lr_image: 1e-3,
            lr_text: 1e-3,
            lr_caption_head: 1e-3,
            batch_size: 8,
            epochs: 30,
            lr_decay_epochs: vec![20, 27],
            lr_decay_factor: 0.1,
            warmup_iters: 200,
            warmup_ratio: 1e-3,
            lr_batch_scaling: true,
            reference_batch: 16,
            weight_decay: 0.05,
            betas: (0.9, 0.999),
            adam_eps: 1e-8,
            weights: LossWeights::default(),
            seed: 0,
            max_context: crate::data::tokenizer::DEFAULT_MAX_CONTEXT,
            target_m: 48,
            batch_mix: BatchMix::Alternate,
            max_steps: None,
            keep_epoch_checkpoints: false,
            model: ModelConfig::default(),
        }
    }

    /// The published optimization settings.
    pub fn published_profile() -> Self {
        Self {
            lr_image: 1.4e-4,
            lr_text: 1.4e-5,
            lr_caption_head: 1.4e-5,
            batch_size: 32,
            epochs: 12,
            lr_decay_epochs: vec![8, 11],
            warmup_iters: 1000,
            warmup_ratio: 1e-4,
            target_m: 150,
            ..Self::desk()
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, lr) in [
            ("lr_image", self.lr_image),
            ("lr_text", self.lr_text),
            ("lr_caption_head", self.lr_caption_head),
        ] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        if self.batch_size == 0 || self.epochs == 0 || self.reference_batch == 0 {
            return Err(Error::Config("batch_size, epochs and reference_batch must be positive".into()));
        }
        if self.lr_decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("lr_decay_epochs must be strictly increasing".into()));
        }
        if self.lr_decay_epochs.iter().any(|&e| e >= self.epochs) {
            return Err(Error::Config("lr_decay_epochs must be smaller than epochs".into()));
        }
        if self.max_context != self.model.max_context {
            return Err(Error::Config(format!(
                "max_context {} differs from the model's {}",
                self.max_context, self.model.max_context
            )));
        }
        if self.target_m == 0 {
            return Err(Error::Config("target_m must be positive".into()));
        }
        self.weights.validate()?;
        self.model.validate()
    }

    /// `sqrt(batch / reference)` when batch scaling is on, else 1.
    pub fn batch_scale(&self) -> f64 {
        if self.lr_batch_scaling {
            (self.batch_size as f64 / self.reference_batch as f64).sqrt()
        } else {
            1.0
        }
    }

    /// Warmup times step-decay factor at a given optimizer step and epoch.
    pub fn lr_factor(&self, step: u64, epoch: usize) -> f64 {
        let warm = if self.warmup_iters == 0 || step >= self.warmup_iters {
            1.0
        } else {
            self.warmup_ratio + (1.0 - self.warmup_ratio) * step as f64 / self.warmup_iters as f64
        };
        let decays = self.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
        warm * self.lr_decay_factor.powi(decays as i32)
    }

    /// Peak learning rates `(image, text, caption)` after batch scaling.
    pub fn peak_lrs(&self) -> [f64; 3] {
        let s = self.batch_scale();
        [self.lr_image * s, self.lr_text * s, self.lr_caption_head * s]
    }
}
