//! Mirror-of-VGG decoder and the pixel-space embedding step.

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;

use crate::encoder::{Arch, LayerTag, DOWNSAMPLE};
use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::params::{Conv, ForwardCounter};
use crate::resample::nearest_index;

/// Trainable decoder: nine 3x3 convolutions mirroring `conv4_1 .. conv1_1`,
/// with nearest 2x upsampling where the encoder pooled.
#[derive(Debug, Clone)]
pub struct DecoderParams {
    layers: Vec<Conv>,
    forwards: ForwardCounter,
}

/// Scale applied to the Kaiming init of the final convolution.
const OUTPUT_INIT_GAIN: f64 = 0.1;

/// Layers after which the decoder upsamples by two.
const UPSAMPLE_AFTER: [&str; 3] = ["dec4_1", "dec3_1", "dec2_1"];

impl DecoderParams {
    /// `(name, out_channels, in_channels)` for `arch`; the first layer takes the mask channel too.
    pub fn layout(arch: Arch) -> Vec<(&'static str, usize, usize)> {
        let [w1, w2, w3, w4] = LayerTag::ALL.map(|t| arch.channels(t));
        vec![
            ("dec4_1", w3, w4 + 1),
            ("dec3_4", w3, w3),
            ("dec3_3", w3, w3),
            ("dec3_2", w3, w3),
            ("dec3_1", w2, w3),
            ("dec2_2", w2, w2),
            ("dec2_1", w1, w2),
            ("dec1_2", w1, w1),
            ("dec1_1", 3, w1),
        ]
    }

    pub fn init<R: Rng>(arch: Arch, rng: &mut R, dtype: DType, device: &Device) -> Result<Self> {
        let layers = Self::layout(arch)
            .into_iter()
            .map(|(name, cout, cin)| Conv::kaiming(name, cout, cin, 3, rng, dtype, device))
            .collect::<Result<Vec<_>>>()?;
        // Start the linear output layer near mid-gray so the clamp is inactive at step 0.
        let last = layers.last().expect("decoder has layers");
        last.weight.set(&(last.weight.as_tensor() * OUTPUT_INIT_GAIN)?)?;
        last.bias.set(&(last.bias.ones_like()? * 0.5)?)?;
        Ok(Self { layers, forwards: ForwardCounter::default() })
    }

    /// Rebuilds from named `(weight, bias)` tensors, checking shapes against `arch`.
    pub fn from_tensors(arch: Arch, get: impl Fn(&str) -> Option<Tensor>) -> Result<Self> {
        let layers = Self::layout(arch)
            .into_iter()
            .map(|(name, cout, cin)| {
                let fetch = |suffix: &str, expect: &[usize]| -> Result<Tensor> {
                    let key = format!("decoder.{name}.{suffix}");
                    let t = get(&key).ok_or_else(|| Error::Schema { name: key.clone(), reason: "missing tensor".into() })?;
                    if t.dims() != expect {
                        return Err(Error::Schema { name: key, reason: format!("expected {expect:?}, found {:?}", t.dims()) });
                    }
                    Ok(t)
                };
                Conv::from_tensors(name, &fetch("weight", &[cout, cin, 3, 3])?, &fetch("bias", &[cout])?)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers, forwards: ForwardCounter::default() })
    }

    pub fn layers(&self) -> &[Conv] {
        &self.layers
    }

    pub fn in_channels(&self) -> usize {
        self.layers[0].in_channels()
    }

    /// Number of decoder forward passes so far (shared with clones).
    pub fn forward_count(&self) -> usize {
        self.forwards.get()
    }

    pub fn named_vars(&self) -> Vec<(String, Var)> {
        self.layers.iter().flat_map(|c| c.named_vars("decoder.")).collect()
    }

    /// Maps `(B, C+1, h, w)` to `(B, 3, 8h, 8w)`, clamped to `[0, 1]`.
    ///
    /// The clamp is straight-through: gradients pass as if it were the identity,
    /// so pixels pushed out of range by a step can still be pulled back.
    pub fn decode(&self, x: &Tensor) -> Result<Tensor> {
        let raw = self.decode_unclamped(x)?;
        let clamped = raw.clamp(0.0, 1.0)?;
        Ok((&raw + (clamped - &raw)?.detach())?)
    }

    /// The raw output of the final (linear) convolution.
    pub fn decode_unclamped(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.in_channels() {
            return Err(Error::Dimension(format!("decoder expects {} channels, got {c}", self.in_channels())));
        }
        self.forwards.bump();
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i == last {
                break;
            }
            h = h.relu()?;
            if UPSAMPLE_AFTER.contains(&layer.name.as_str()) {
                let (_, _, hh, ww) = h.dims4()?;
                h = h.upsample_nearest2d(2 * hh, 2 * ww)?;
            }
        }
        Ok(h)
    }
}

/// Nearest downsample (cell-centre sampling) of a `(B, 1, H, W)` mask to `(B, 1, H/8, W/8)`.
pub fn downsample_mask(mask: &Tensor) -> Result<Tensor> {
    let (_, c, h, w) = mask.dims4()?;
    if c != 1 || h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 {
        return Err(Error::Dimension(format!("mask {h}x{w} with {c} channels cannot be downsampled by {DOWNSAMPLE}")));
    }
    let (th, tw) = (h / DOWNSAMPLE, w / DOWNSAMPLE);
    let rows: Vec<u32> = (0..th).map(|i| nearest_index(i, h, th) as u32).collect();
    let cols: Vec<u32> = (0..tw).map(|i| nearest_index(i, w, tw) as u32).collect();
    let dev = mask.device();
    Ok(mask
        .index_select(&Tensor::new(rows.as_slice(), dev)?, 2)?
        .index_select(&Tensor::new(cols.as_slice(), dev)?, 3)?)
}

/// Appends the downsampled mask as an extra feature channel.
pub fn concat_mask(fused: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let (b, _, h, w) = fused.dims4()?;
    let (mb, _, mh, mw) = mask.dims4()?;
    if mb != b || mh != h * DOWNSAMPLE || mw != w * DOWNSAMPLE {
        return Err(Error::Dimension(format!(
            "mask {mh}x{mw} does not match features {h}x{w} at downsample {DOWNSAMPLE}"
        )));
    }
    let md = downsample_mask(mask)?.to_dtype(fused.dtype())?;
    Ok(Tensor::cat(&[fused, &md], 1)?)
}

/// `Io * M + Ib * (1 - M)`: pixels outside the mask are copied from `Ib` exactly.
pub fn embed(io: &Image, ib: &Image, mask: &Mask) -> Result<Image> {
    let (h, w) = (ib.height(), ib.width());
    if (io.height(), io.width()) != (h, w) || (mask.height(), mask.width()) != (h, w) {
        return Err(Error::Dimension(format!(
            "embed needs equal sizes, got output {}x{}, background {h}x{w}, mask {}x{}",
            io.height(),
            io.width(),
            mask.height(),
            mask.width()
        )));
    }
    let n = h * w;
    let m = mask.data();
    let data = (0..3 * n)
        .map(|i| {
            let mi = f32::from(m[i % n]);
            io.data()[i] * mi + ib.data()[i] * (1.0 - mi)
        })
        .collect();
    Image::new(h, w, data)
}
