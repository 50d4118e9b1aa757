//! Run configuration: training, augmentation, encoder, generator, probe and
//! ablation settings in one TOML document. Unknown keys are rejected.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::GeneratorParams;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::loss::NegativeScope;
use crate::optim::AdamWConfig;
use crate::patchify::AugmentConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: u64,
    pub warmup_epochs: u64,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    /// Key-branch momentum `m`.
    pub momentum: f64,
    /// InfoNCE temperature `τ`.
    pub temperature: f64,
    /// Weight `λ` of the reconstruction loss.
    pub lambda: f64,
    pub mask_ratio: f64,
    pub seed: u64,
    pub entropy_bins: usize,
    /// Global gradient-norm cap; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Also write a checkpoint every this many steps (one is always written
    /// at the end of each epoch).
    pub checkpoint_every: Option<u64>,
    pub corpus: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 30,
            warmup_epochs: 3,
            base_lr: 1.5e-3,
            weight_decay: 0.05,
            betas: (0.9, 0.95),
            momentum: 0.999,
            temperature: 0.2,
            lambda: 2.0,
            mask_ratio: 0.6,
            seed: 0,
            entropy_bins: 256,
            grad_clip: None,
            checkpoint_every: None,
            corpus: None,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl TrainConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { beta1: self.betas.0, beta2: self.betas.1, weight_decay: self.weight_decay, ..AdamWConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} must be less than epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.base_lr >= 0.0 && self.weight_decay >= 0.0 && self.temperature > 0.0 && self.lambda >= 0.0) {
            return Err(Error::Config("rates must be nonnegative and temperature positive".into()));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::Config("mask_ratio must lie in [0, 1)".into()));
        }
        if self.entropy_bins < 2 {
            return Err(Error::Config("entropy_bins must be at least 2".into()));
        }
        if self.grad_clip.is_some_and(|c| c <= 0.0) || self.checkpoint_every == Some(0) {
            return Err(Error::Config("grad_clip and checkpoint_every must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MemTarget {
    /// Normalized Shannon entropy of each masked source patch.
    #[default]
    Entropy,
    /// Raw pixels of each masked source patch.
    Pixels,
}

impl FromStr for MemTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entropy" => Ok(MemTarget::Entropy),
            "pixels" => Ok(MemTarget::Pixels),
            other => Err(Error::Config(format!("unknown mem_target `{other}` (entropy | pixels)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    /// Per-patch shifted views; when off both views are whole-image
    /// augmentations cut into an aligned grid.
    pub shifted_patchify: bool,
    /// Patch-wise InfoNCE; when off, image-wise InfoNCE on pooled features.
    pub patch_wise_loss: bool,
    /// Masked reconstruction loss; when off its weight is zero.
    pub mem: bool,
    pub mem_target: MemTarget,
    pub negatives: NegativeScope,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            shifted_patchify: true,
            patch_wise_loss: true,
            mem: true,
            mem_target: MemTarget::Entropy,
            negatives: NegativeScope::Batch,
        }
    }
}

impl AblationFlags {
    /// Rows (a)–(f): none, SP, patch-wise loss, MEM, SP + patch-wise, all.
    pub fn preset(row: char) -> Result<Self> {
        let (sp, pw, mem) = match row.to_ascii_lowercase() {
            'a' => (false, false, false),
            'b' => (true, false, false),
            'c' => (false, true, false),
            'd' => (false, false, true),
            'e' => (true, true, false),
            'f' => (true, true, true),
            other => return Err(Error::Config(format!("unknown ablation preset `{other}` (a..f)"))),
        };
        Ok(Self { shifted_patchify: sp, patch_wise_loss: pw, mem, ..Self::default() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preprocess {
    /// Raw embeddings.
    None,
    /// Per-dimension zero mean and unit variance.
    Standardize,
    /// Zero mean and identity covariance (PCA whitening); directions with
    /// numerically zero variance are dropped.
    #[default]
    Whiten,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Fixed input transform fitted on the probe's training embeddings.
    pub preprocess: Preprocess,
    /// Train / val / test fractions of the stratified split.
    pub split: (f64, f64, f64),
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 128,
            preprocess: Preprocess::Whiten,
            split: (0.75, 0.0, 0.25),
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("probe epochs, batch_size and lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("probe momentum must lie in [0, 1) and weight_decay be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub encoder: EncoderConfig,
    pub generator: GeneratorParams,
    pub probe: ProbeConfig,
    pub ablation: AblationFlags,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Sets every seed in the document.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.generator.seed = seed;
        self.probe.seed = seed;
    }

    /// Output width of the reconstruction head.
    pub fn recon_dim(&self) -> usize {
        match self.ablation.mem_target {
            MemTarget::Entropy => 1,
            MemTarget::Pixels => self.encoder.patch_dim(),
        }
    }

    /// Reconstruction weight actually applied to the total loss.
    pub fn effective_lambda(&self) -> f64 {
        if self.ablation.mem {
            self.train.lambda
        } else {
            0.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.encoder.validate()?;
        self.augment.validate(self.encoder.patch_size)?;
        self.generator.validate(self.encoder.patch_size)?;
        self.probe.validate()?;
        if self.generator.image_size != self.encoder.image_size() {
            return Err(Error::Config(format!(
                "generator image size {} differs from encoder input size {}",
                self.generator.image_size,
                self.encoder.image_size()
            )));
        }
        Ok(())
    }
}
