//! Training configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SampleGeometry;
use crate::encoder::DOWNSAMPLE;
use crate::error::{Error, Result};
use crate::losses::{LossWeights, PairMode};
use crate::model::ModelConfig;
use crate::psf::{FusionMode, DEFAULT_OMEGA};
use crate::saliency::DEFAULT_WINDOW;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr0: f64,
    /// Inverse-time decay: `lr_t = lr0 / (1 + lr_decay * t)`.
    pub lr_decay: f64,
    pub max_iters: u64,
    /// Local statistics window of the fusion module and the BPA loss.
    pub omega: usize,
    pub saliency_window: usize,
    /// Sample this many position pairs per image in the immerse loss instead of all of them.
    pub pair_sample_k: Option<usize>,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub image_size: usize,
    pub background_resize: usize,
    pub base_width: usize,
    pub fusion: FusionMode,
    pub fusion_init_std: f64,
    /// Keep the fusion convolutions at their initialization.
    pub freeze_fusion: bool,
    /// Drop grayscale backgrounds during discovery.
    pub cull_gray: bool,
    pub weights: LossWeights,
    /// Encoder weight archive.
    pub encoder: PathBuf,
    /// Directory with `foregrounds/`, `masks/` and `backgrounds/`.
    pub dataset: PathBuf,
    /// Checkpoints and `train_log.jsonl` go here.
    pub output_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            lr0: 1e-4,
            lr_decay: 5e-5,
            max_iters: 160_000,
            omega: DEFAULT_OMEGA,
            saliency_window: DEFAULT_WINDOW,
            pair_sample_k: None,
            seed: 0,
            checkpoint_every: 5_000,
            image_size: 256,
            background_resize: 512,
            base_width: 64,
            fusion: FusionMode::Psf,
            fusion_init_std: 1e-2,
            freeze_fusion: false,
            cull_gray: true,
            weights: LossWeights::default(),
            encoder: PathBuf::from("weights/vgg19_relu4_1.safetensors"),
            dataset: PathBuf::from("data"),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it resolve against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg = Self::from_toml(&std::fs::read_to_string(path)?)?;
        if let Some(base) = path.parent() {
            for p in [&mut cfg.encoder, &mut cfg.dataset, &mut cfg.output_dir] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) || !(self.lr_decay >= 0.0 && self.lr_decay.is_finite()) {
            return fail(format!("invalid learning rate schedule lr0={} lr_decay={}", self.lr0, self.lr_decay));
        }
        if self.omega.is_multiple_of(2) || self.saliency_window.is_multiple_of(2) {
            return fail(format!("omega ({}) and saliency_window ({}) must be odd", self.omega, self.saliency_window));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(DOWNSAMPLE) {
            return fail(format!("image_size {} must be a positive multiple of {DOWNSAMPLE}", self.image_size));
        }
        if self.background_resize < self.image_size {
            return fail(format!("background_resize {} is below image_size {}", self.background_resize, self.image_size));
        }
        if self.base_width == 0 || self.checkpoint_every == 0 {
            return fail("base_width and checkpoint_every must be positive".into());
        }
        if self.pair_sample_k == Some(0) {
            return fail("pair_sample_k must be positive when set".into());
        }
        self.weights.validate()
    }

    /// `lr0 / (1 + lr_decay * t)`.
    pub fn lr_at(&self, t: u64) -> f64 {
        self.lr0 / (1.0 + self.lr_decay * t as f64)
    }

    pub fn pair_mode(&self) -> PairMode {
        self.pair_sample_k.map_or(PairMode::Exact, PairMode::Sampled)
    }

    pub fn geometry(&self) -> SampleGeometry {
        SampleGeometry { size: self.image_size, background_resize: self.background_resize }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            base_width: self.base_width,
            fusion: self.fusion,
            omega: self.omega,
            saliency_window: self.saliency_window,
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_reference_hyperparameters() {
        let c = TrainConfig::default();
        assert_eq!(c.batch_size, 8);
        assert_eq!(c.lr0, 1e-4);
        assert_eq!(c.omega, 7);
        assert_eq!(c.weights, LossWeights { im: 1.2e4, re: 1e2, bpa: 1e2, tv: 5e-2 });
        c.validate().unwrap();
    }

    #[test]
    fn schedule() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(0), 1e-4);
        assert!((c.lr_at(20_000) - 5e-5).abs() < 1e-18);
    }

    #[test]
    fn toml_partial_and_unknown_fields() {
        let c = TrainConfig::from_toml("batch_size = 2\nfusion = \"adain\"\n[weights]\ntv = 0.0\n").unwrap();
        assert_eq!(c.batch_size, 2);
        assert_eq!(c.fusion, FusionMode::Adain);
        assert_eq!(c.weights.tv, 0.0);
        assert_eq!(c.weights.im, 1.2e4);
        assert!(matches!(TrainConfig::from_toml("bogus = 1"), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::from_toml("omega = 4"), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::from_toml("image_size = 250"), Err(Error::Config(_))));
    }

    #[test]
    fn hash_tracks_content() {
        let a = TrainConfig::default();
        let b = TrainConfig { seed: 1, ..a.clone() };
        assert_eq!(a.hash(), a.clone().hash());
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn relative_paths_resolve_next_to_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "dataset = \"toy\"\noutput_dir = \"/abs/out\"\n").unwrap();
        let c = TrainConfig::load(&path).unwrap();
        assert_eq!(c.dataset, dir.path().join("toy"));
        assert_eq!(c.output_dir, PathBuf::from("/abs/out"));
    }
}
