//! Position-aligned structure fusion.
//!
//! Foreground and background `relu4_1` features are compared position by
//! position. Where their (appearance-free) structure agrees, the foreground
//! is kept after re-styling it with the background's local statistics;
//! elsewhere the background feature passes through.

use std::str::FromStr;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{mean_var_normalize, STAT_EPS};
use crate::error::{Error, Result};
use crate::params::Conv;
use crate::tensor_ops::{channel_moments, normal_tensor};

/// Default local-statistics window.
pub const DEFAULT_OMEGA: usize = 7;

/// Raw cosine ranges narrower than this count as constant when min-max scaling.
pub const DEGENERATE_RANGE: f64 = 1e-5;

const COS_EPS: f64 = 1e-12;

/// The four `1x1` convolutions `f`, `g` (similarity) and `e`, `h` (fusion).
#[derive(Debug, Clone)]
pub struct FusionParams {
    pub f: Conv,
    pub g: Conv,
    pub e: Conv,
    pub h: Conv,
}

impl FusionParams {
    /// Identity kernels plus `N(0, noise_std^2)` perturbation, zero bias.
    pub fn init<R: Rng>(channels: usize, noise_std: f64, rng: &mut R, dtype: DType, device: &Device) -> Result<Self> {
        let mut make = |name: &str| -> Result<Conv> {
            let eye = Tensor::eye(channels, dtype, device)?;
            let noise = normal_tensor(&[channels, channels], noise_std, rng, dtype, device)?;
            let w = (eye + noise)?.reshape((channels, channels, 1, 1))?;
            Conv::from_tensors(name, &w, &Tensor::zeros(channels, dtype, device)?)
        };
        Ok(Self { f: make("f")?, g: make("g")?, e: make("e")?, h: make("h")? })
    }

    pub fn identity(channels: usize, dtype: DType, device: &Device) -> Result<Self> {
        let make = |name: &str| -> Result<Conv> {
            let w = Tensor::eye(channels, dtype, device)?.reshape((channels, channels, 1, 1))?;
            Conv::from_tensors(name, &w, &Tensor::zeros(channels, dtype, device)?)
        };
        Ok(Self { f: make("f")?, g: make("g")?, e: make("e")?, h: make("h")? })
    }

    pub fn channels(&self) -> usize {
        self.f.out_channels()
    }

    pub fn convs(&self) -> [&Conv; 4] {
        [&self.f, &self.g, &self.e, &self.h]
    }

    pub fn named_vars(&self) -> Vec<(String, Var)> {
        self.convs().iter().flat_map(|c| c.named_vars("fusion.")).collect()
    }
}

/// Which fusion the network uses: the PSF module or one of the two ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    #[default]
    Psf,
    /// Global AdaIN of the foreground onto background statistics.
    Adain,
    /// Local AdaIN of the summed normalized structures.
    Sum,
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "psf" => Ok(Self::Psf),
            "adain" => Ok(Self::Adain),
            "sum" => Ok(Self::Sum),
            other => Err(Error::Config(format!("unknown fusion mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FusionOutput {
    /// `(B, C, H, W)`
    pub fused: Tensor,
    /// `(B, 1, H, W)` similarity gate; only produced by [`FusionMode::Psf`].
    pub similarity: Option<Tensor>,
}

fn check_same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Dimension(format!("feature shapes differ: {:?} vs {:?}", a.dims(), b.dims())));
    }
    a.dims4()?;
    Ok(())
}

fn check_window(omega: usize) -> Result<()> {
    if omega.is_multiple_of(2) {
        Err(Error::Parameter(format!("window size must be odd, got {omega}")))
    } else {
        Ok(())
    }
}

/// Per-position cosine similarity after the `f`/`g` projections, min-max
/// scaled per sample to `[0, 1]` (`0.5` everywhere when degenerate).
pub fn structure_similarity(ff_norm: &Tensor, fb_norm: &Tensor, params: &FusionParams) -> Result<Tensor> {
    check_same_shape(ff_norm, fb_norm)?;
    let a = params.f.forward(ff_norm)?;
    let b = params.g.forward(fb_norm)?;
    let dot = (&a * &b)?.sum_keepdim(1)?;
    let na = a.sqr()?.sum_keepdim(1)?.sqrt()?;
    let nb = b.sqr()?.sum_keepdim(1)?.sqrt()?;
    let cos = dot.div(&(na * nb)?.maximum(COS_EPS)?)?;
    min_max_scale(&cos)
}

/// Min-max scaling of a `(B, 1, H, W)` map over its spatial positions.
pub fn min_max_scale(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let flat = x.flatten_from(1)?;
    let lo = flat.min_keepdim(1)?;
    let range = flat.max_keepdim(1)?.sub(&lo)?;
    let informative = range.gt(DEGENERATE_RANGE)?;
    let safe_range = informative.where_cond(&range, &range.ones_like()?)?;
    let scaled = flat.broadcast_sub(&lo)?.broadcast_div(&safe_range)?;
    let half = (scaled.ones_like()? * 0.5)?;
    let gate = informative.broadcast_as(scaled.shape())?.contiguous()?;
    Ok(gate.where_cond(&scaled, &half)?.reshape((b, c, h, w))?)
}

/// Window mean and regularized standard deviation, replicate padded, same shape as `x`.
pub fn local_stats(x: &Tensor, omega: usize) -> Result<(Tensor, Tensor)> {
    check_window(omega)?;
    let (_, _, h, w) = x.dims4()?;
    let r = omega / 2;
    let padded = x.pad_with_same(2, r, r)?.pad_with_same(3, r, r)?;
    let box_mean = |t: &Tensor| -> Result<Tensor> {
        let mut rows = t.narrow(3, 0, w)?;
        for d in 1..omega {
            rows = (rows + t.narrow(3, d, w)?)?;
        }
        let mut acc = rows.narrow(2, 0, h)?;
        for d in 1..omega {
            acc = (acc + rows.narrow(2, d, h)?)?;
        }
        Ok((acc / (omega * omega) as f64)?)
    };
    let mean = box_mean(&padded)?;
    let mean_sq = box_mean(&padded.sqr()?)?;
    let var = (mean_sq - mean.sqr()?)?.relu()?;
    let std = (var + STAT_EPS)?.sqrt()?;
    Ok((mean, std))
}

/// `std_b(i) * ff_norm(i) + mean_b(i)` with windowed background statistics.
pub fn local_adain(ff_norm: &Tensor, fb: &Tensor, omega: usize) -> Result<Tensor> {
    check_same_shape(ff_norm, fb)?;
    let (mean, std) = local_stats(fb, omega)?;
    Ok(((ff_norm * std)? + mean)?)
}

/// `A * e(x) + (1 - A) * h(fb)` with a caller-supplied gate `A` of shape `(B, 1, H, W)`.
pub fn fuse_with_gate(restyled: &Tensor, fb: &Tensor, gate: &Tensor, params: &FusionParams) -> Result<Tensor> {
    let fg = params.e.forward(restyled)?;
    let bg = params.h.forward(fb)?;
    let keep = gate.broadcast_as(fg.shape())?;
    let drop = (gate.ones_like()? - gate)?.broadcast_as(bg.shape())?;
    Ok(((fg * keep)? + (bg * drop)?)?)
}

pub fn psf_fuse(ff: &Tensor, fb: &Tensor, params: &FusionParams, omega: usize) -> Result<FusionOutput> {
    check_same_shape(ff, fb)?;
    let ff_norm = mean_var_normalize(ff)?;
    let fb_norm = mean_var_normalize(fb)?;
    let gate = structure_similarity(&ff_norm, &fb_norm, params)?;
    let restyled = local_adain(&ff_norm, fb, omega)?;
    let fused = fuse_with_gate(&restyled, fb, &gate, params)?;
    Ok(FusionOutput { fused, similarity: Some(gate) })
}

/// Global per-channel AdaIN of `ff` onto the statistics of `fb`.
pub fn adain_fuse(ff: &Tensor, fb: &Tensor) -> Result<Tensor> {
    check_same_shape(ff, fb)?;
    let (mf, vf) = channel_moments(ff)?;
    let (mb, vb) = channel_moments(fb)?;
    let sf = (vf + STAT_EPS)?.sqrt()?;
    let sb = (vb + STAT_EPS)?.sqrt()?;
    Ok(ff.broadcast_sub(&mf)?.broadcast_div(&sf)?.broadcast_mul(&sb)?.broadcast_add(&mb)?)
}

/// Local AdaIN of `norm(ff) + norm(fb)` onto `fb`.
pub fn sum_fuse(ff: &Tensor, fb: &Tensor, omega: usize) -> Result<Tensor> {
    check_same_shape(ff, fb)?;
    let structure = (mean_var_normalize(ff)? + mean_var_normalize(fb)?)?;
    local_adain(&structure, fb, omega)
}

pub fn fuse(mode: FusionMode, ff: &Tensor, fb: &Tensor, params: &FusionParams, omega: usize) -> Result<FusionOutput> {
    match mode {
        FusionMode::Psf => psf_fuse(ff, fb, params, omega),
        FusionMode::Adain => Ok(FusionOutput { fused: adain_fuse(ff, fb)?, similarity: None }),
        FusionMode::Sum => Ok(FusionOutput { fused: sum_fuse(ff, fb, omega)?, similarity: None }),
    }
}

/// Per-sample, per-channel mean and standard deviation as plain vectors (diagnostics).
pub fn channel_stats(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (mean, var) = channel_moments(&x.to_dtype(DType::F64)?)?;
    let mean: Vec<f64> = mean.flatten_all()?.to_vec1()?;
    let std: Vec<f64> = var.sqrt()?.flatten_all()?.to_vec1()?;
    Ok((mean, std))
}
