//! Training configuration, loadable from TOML.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::AugmentConfig;
use crate::disc::DiscConfig;
use crate::error::{Error, Result};
use crate::losses::{GanLossWeights, SegLossWeights, TverskyParams};
use crate::params::AdamConfig;
use crate::perceptual::PerceptualSource;
use crate::style::GenConfig;
use crate::unet::UNetConfig;

/// Independent random streams derived from the single run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    SegInit = 1,
    GenInit = 2,
    DiscImageInit = 3,
    DiscMaskInit = 4,
    Pretrain = 5,
    Gan = 6,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

pub fn stream_seed(seed: u64, stream: Stream) -> u64 {
    use rand::RngCore;
    stream_rng(seed, stream).next_u64()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs_pretrain: usize,
    pub epochs_gan: usize,
    pub batch_size: usize,
    pub split_ratio: f64,
    /// Foreground threshold for validation metrics.
    pub threshold: f64,
    pub lr_seg: f64,
    /// Segmenter rate during Phase 2; `lr_seg / 10` when absent.
    pub lr_seg_finetune: Option<f64>,
    pub lr_gen: f64,
    pub lr_disc: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seg_finetune: bool,
    pub seg_feedback: bool,
    /// Write a Phase-2 checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
    pub seg_loss: SegLossWeights,
    pub gan_loss: GanLossWeights,
    pub tversky: TverskyParams,
    pub augment: AugmentConfig,
    pub unet: UNetConfig,
    pub generator: GenConfig,
    pub disc: DiscConfig,
    pub perceptual: PerceptualSource,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 42,
            epochs_pretrain: 200,
            epochs_gan: 500,
            batch_size: 4,
            split_ratio: 0.8,
            threshold: 0.5,
            lr_seg: 2e-4,
            lr_seg_finetune: None,
            lr_gen: 2e-4,
            lr_disc: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            seg_finetune: true,
            seg_feedback: true,
            checkpoint_every: 50,
            seg_loss: SegLossWeights::default(),
            gan_loss: GanLossWeights::default(),
            tversky: TverskyParams::default(),
            augment: AugmentConfig::default(),
            unet: UNetConfig::default(),
            generator: GenConfig::default(),
            disc: DiscConfig::default(),
            perceptual: PerceptualSource::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::param("batch_size", "must be >= 1"));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::param("split_ratio", "must lie in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::param("threshold", "must lie in [0, 1]"));
        }
        let lrs = [
            ("lr_seg", self.lr_seg),
            ("lr_seg_finetune", self.seg_finetune_lr()),
            ("lr_gen", self.lr_gen),
            ("lr_disc", self.lr_disc),
        ];
        for (name, lr) in lrs {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::param(name, "learning rate must be positive"));
            }
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::param(name, "must lie in [0, 1)"));
            }
        }
        self.seg_loss.validate()?;
        self.gan_loss.validate()?;
        self.tversky.validate()?;
        self.augment.validate()?;
        self.unet.validate()?;
        self.generator.validate()?;
        self.disc.validate()?;
        Ok(())
    }

    pub fn seg_finetune_lr(&self) -> f64 {
        self.lr_seg_finetune.unwrap_or(self.lr_seg / 10.0)
    }

    pub fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            ..Default::default()
        }
    }

    /// Sets the working resolution of every network at once.
    pub fn set_image_size(&mut self, size: (usize, usize)) {
        self.unet.input_size = size;
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}
