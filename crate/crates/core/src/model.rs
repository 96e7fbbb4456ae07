//! The trainable part of the network and its single forward pass.

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{concat_mask, DecoderParams};
use crate::encoder::{Arch, EncoderParams, FeaturePyramid, LayerTag};
use crate::error::{Error, Result};
use crate::psf::{fuse, FusionMode, FusionParams, DEFAULT_OMEGA};
use crate::saliency::DEFAULT_WINDOW;

/// Architecture choices that must agree between training and inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub base_width: usize,
    pub fusion: FusionMode,
    pub omega: usize,
    pub saliency_window: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { base_width: 64, fusion: FusionMode::Psf, omega: DEFAULT_OMEGA, saliency_window: DEFAULT_WINDOW }
    }
}

impl ModelConfig {
    pub fn arch(&self) -> Result<Arch> {
        Arch::new(self.base_width)
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub decoder: DecoderParams,
    pub fusion: FusionParams,
}

/// Everything a forward pass produces that the losses or debug dumps need.
#[derive(Debug, Clone)]
pub struct Generation {
    /// `(B, 3, H, W)` in `[0, 1]`.
    pub output: Tensor,
    pub foreground: FeaturePyramid,
    pub background: FeaturePyramid,
    /// Structure similarity gate, present for the PSF fusion.
    pub similarity: Option<Tensor>,
}

impl Model {
    pub fn init<R: Rng>(config: ModelConfig, fusion_std: f64, rng: &mut R, device: &Device) -> Result<Self> {
        let arch = config.arch()?;
        let decoder = DecoderParams::init(arch, rng, DType::F32, device)?;
        let fusion = FusionParams::init(arch.channels(LayerTag::Relu4_1), fusion_std, rng, DType::F32, device)?;
        Ok(Self { config, decoder, fusion })
    }

    /// Trainable variables by archive name; fusion parameters are left out when frozen.
    pub fn named_vars(&self, include_fusion: bool) -> Vec<(String, Var)> {
        let mut vars = self.decoder.named_vars();
        if include_fusion {
            vars.extend(self.fusion.named_vars());
        }
        vars
    }

    /// Checks that `encoder` produces the features this model was built for.
    pub fn check_encoder(&self, encoder: &EncoderParams) -> Result<()> {
        if encoder.arch() != self.config.arch()? {
            return Err(Error::Schema {
                name: "encoder".into(),
                reason: format!(
                    "encoder base width {} does not match model base width {}",
                    encoder.arch().base_width,
                    self.config.base_width
                ),
            });
        }
        Ok(())
    }

    /// Encodes foreground and background in one batched encoder call, fuses at
    /// `relu4_1`, appends the mask and decodes once.
    ///
    /// `fg`, `bg`: `(B, 3, H, W)` in `[0, 1]`; `mask`: `(B, 1, H, W)`.
    pub fn generate(&self, encoder: &EncoderParams, fg: &Tensor, bg: &Tensor, mask: &Tensor) -> Result<Generation> {
        if fg.dims() != bg.dims() {
            return Err(Error::Dimension(format!("foreground {:?} vs background {:?}", fg.dims(), bg.dims())));
        }
        let b = fg.dim(0)?;
        let pyramid = encoder.encode(&Tensor::cat(&[fg, bg], 0)?)?;
        let (foreground, background) = pyramid.split_batch(b)?;
        let fused = fuse(
            self.config.fusion,
            foreground.get(LayerTag::Relu4_1),
            background.get(LayerTag::Relu4_1),
            &self.fusion,
            self.config.omega,
        )?;
        let x = concat_mask(&fused.fused, mask)?;
        let output = self.decoder.decode(&x)?;
        Ok(Generation { output, foreground, background, similarity: fused.similarity })
    }
}
