//! Training objectives: immerse, remove, background-patch-appearance and total variation.
//!
//! Every term is normalized by its element or pair count and averaged over the batch.

use candle_core::{DType, Tensor};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{FeaturePyramid, LayerTag};
use crate::error::{Error, Result};
use crate::psf::local_stats;
use crate::saliency::resize_saliency_tensor;
use crate::tensor_ops::{safe_sqrt, scalar};

/// Row-tile height of the exact pairwise computation.
const PAIR_TILE: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub im: f64,
    pub re: f64,
    pub bpa: f64,
    pub tv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { im: 1.2e4, re: 1e2, bpa: 1e2, tv: 5e-2 }
    }
}

impl LossWeights {
    pub const ZERO: Self = Self { im: 0.0, re: 0.0, bpa: 0.0, tv: 0.0 };

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("im", self.im), ("re", self.re), ("bpa", self.bpa), ("tv", self.tv)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("loss weight {name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub im: f64,
    pub re: f64,
    pub bpa: f64,
    pub tv: f64,
}

/// How the immerse loss visits position pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PairMode {
    #[default]
    Exact,
    /// `k` ordered pairs per sample, drawn uniformly without replacement.
    Sampled(usize),
}

fn check_grid(name: &str, t: &Tensor, b: usize, c: usize, h: usize, w: usize) -> Result<()> {
    if t.dims() != [b, c, h, w] {
        return Err(Error::Dimension(format!("{name} expected {:?}, found {:?}", [b, c, h, w], t.dims())));
    }
    Ok(())
}

/// Contrast-preservation loss on the `relu4_1` grid.
///
/// `fo_norm`, `ff_norm`: `(B, C, h, w)`; `saliency`, `mask`: `(B, 1, h, w)`.
/// For each ordered pair `i != j` with `mask_i OR mask_j`, the cost is
/// `|D_i - D_j| * (S_i + S_j)` where `D = fo_norm - ff_norm`, averaged over those pairs.
pub fn immerse_loss<R: Rng>(
    fo_norm: &Tensor,
    ff_norm: &Tensor,
    saliency: &Tensor,
    mask: &Tensor,
    mode: PairMode,
    rng: &mut R,
) -> Result<Tensor> {
    let (b, c, h, w) = fo_norm.dims4()?;
    check_grid("ff_norm", ff_norm, b, c, h, w)?;
    check_grid("saliency", saliency, b, 1, h, w)?;
    check_grid("mask", mask, b, 1, h, w)?;
    let n = h * w;
    let dtype = fo_norm.dtype();
    let diff = (fo_norm - ff_norm)?.reshape((b, c, n))?;
    let s = saliency.to_dtype(dtype)?.reshape((b, n))?;
    let m = mask.to_dtype(dtype)?.reshape((b, n))?;
    let mut per_sample = Vec::with_capacity(b);
    let mut empty = 0;
    for k in 0..b {
        let (dk, sk, mk) = (diff.get(k)?, s.get(k)?, m.get(k)?);
        let term = match mode {
            PairMode::Exact => immerse_exact(&dk, &sk, &mk)?,
            PairMode::Sampled(count) => immerse_sampled(&dk, &sk, &mk, count, rng)?,
        };
        match term {
            Some(t) => per_sample.push(t),
            None => {
                empty += 1;
                per_sample.push(Tensor::zeros((), dtype, fo_norm.device())?);
            }
        }
    }
    if empty > 0 {
        log::warn!("immerse loss: {empty} of {b} samples have no qualifying pair (empty downsampled mask)");
    }
    Ok(Tensor::stack(&per_sample, 0)?.mean(0)?)
}

/// One sample, all pairs tiled by rows. `d`: `(C, N)`; `s`, `m`: `(N,)`.
fn immerse_exact(d: &Tensor, s: &Tensor, m: &Tensor) -> Result<Option<Tensor>> {
    let n = d.dim(1)?;
    let mv: Vec<f64> = m.to_dtype(DType::F64)?.to_vec1()?;
    let inside = mv.iter().filter(|&&v| v > 0.5).count();
    // ordered pairs i != j with at least one endpoint inside the mask
    let pairs = n * (n - 1) - (n - inside) * (n - inside).saturating_sub(1);
    if pairs == 0 {
        return Ok(None);
    }
    let sq = d.sqr()?.sum(0)?;
    let mut total: Option<Tensor> = None;
    for r0 in (0..n).step_by(PAIR_TILE) {
        let t = PAIR_TILE.min(n - r0);
        let rows = d.narrow(1, r0, t)?;
        let gram = rows.t()?.matmul(d)?;
        let dist2 = sq.narrow(0, r0, t)?.unsqueeze(1)?.broadcast_add(&sq.unsqueeze(0)?)?.sub(&(gram * 2.0)?)?;
        let off_diag = off_diagonal(r0, t, n, d)?;
        let dist = safe_sqrt(&(dist2.relu()? * &off_diag)?)?;
        let s_sum = s.narrow(0, r0, t)?.unsqueeze(1)?.broadcast_add(&s.unsqueeze(0)?)?;
        let mr = m.narrow(0, r0, t)?.unsqueeze(1)?;
        let mc = m.unsqueeze(0)?;
        let either = mr.broadcast_add(&mc)?.sub(&mr.broadcast_mul(&mc)?)?;
        let weight = ((s_sum * either)? * off_diag)?;
        let part = (dist * weight)?.sum_all()?;
        total = Some(match total {
            Some(acc) => (acc + part)?,
            None => part,
        });
    }
    Ok(Some((total.expect("at least one tile") / pairs as f64)?))
}

fn off_diagonal(r0: usize, t: usize, n: usize, like: &Tensor) -> Result<Tensor> {
    let data: Vec<f64> = (0..t * n).map(|idx| if idx / n + r0 == idx % n { 0.0 } else { 1.0 }).collect();
    Ok(Tensor::from_vec(data, (t, n), like.device())?.to_dtype(like.dtype())?)
}

fn immerse_sampled<R: Rng>(d: &Tensor, s: &Tensor, m: &Tensor, count: usize, rng: &mut R) -> Result<Option<Tensor>> {
    let n = d.dim(1)?;
    let universe = n * (n - 1);
    if count == 0 || universe == 0 {
        return Ok(None);
    }
    let mv: Vec<f64> = m.to_dtype(DType::F64)?.to_vec1()?;
    let (mut ii, mut jj) = (Vec::new(), Vec::new());
    for p in sample(rng, universe, count.min(universe)).into_iter() {
        let i = p / (n - 1);
        let mut j = p % (n - 1);
        if j >= i {
            j += 1;
        }
        if mv[i] > 0.5 || mv[j] > 0.5 {
            ii.push(i as u32);
            jj.push(j as u32);
        }
    }
    if ii.is_empty() {
        return Ok(None);
    }
    let dev = d.device();
    let (it, jt) = (Tensor::new(ii.as_slice(), dev)?, Tensor::new(jj.as_slice(), dev)?);
    let delta = (d.index_select(&it, 1)? - d.index_select(&jt, 1)?)?;
    let dist = safe_sqrt(&delta.sqr()?.sum(0)?)?;
    let weight = (s.index_select(&it, 0)? + s.index_select(&jt, 0)?)?;
    Ok(Some(((dist * weight)?.sum_all()? / ii.len() as f64)?))
}

/// Saliency-gated feature reconstruction towards the background.
///
/// Per layer and sample: `|(1 - S_l) * (E_l(Io) - E_l(Ib))|_F / sqrt(n)`, with
/// `S_l` the `(B, 1, h, w)` saliency bilinearly resized to that layer's grid.
pub fn remove_loss(pyr_o: &FeaturePyramid, pyr_b: &FeaturePyramid, saliency: &Tensor) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for tag in LayerTag::ALL {
        let (o, bg) = (pyr_o.get(tag), pyr_b.get(tag));
        if o.dims() != bg.dims() {
            return Err(Error::Schema {
                name: tag.name().into(),
                reason: format!("pyramid shapes differ: {:?} vs {:?}", o.dims(), bg.dims()),
            });
        }
        let (b, c, h, w) = o.dims4()?;
        let gate = (1.0 - resize_saliency_tensor(saliency, h, w)?.to_dtype(o.dtype())?)?;
        let gated = (o - bg)?.broadcast_mul(&gate)?;
        let per_sample = safe_sqrt(&gated.sqr()?.reshape((b, c * h * w))?.sum(1)?)?;
        let term = (per_sample.mean(0)? / ((c * h * w) as f64).sqrt())?;
        total = Some(match total {
            Some(acc) => (acc + term)?,
            None => term,
        });
    }
    Ok(total.expect("four layers"))
}

/// Windowed mean/std matching between output and background features, summed over layers.
pub fn bpa_loss(pyr_o: &FeaturePyramid, pyr_b: &FeaturePyramid, omega: usize) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for tag in LayerTag::ALL {
        let (o, bg) = (pyr_o.get(tag), pyr_b.get(tag));
        if o.dims() != bg.dims() {
            return Err(Error::Schema {
                name: tag.name().into(),
                reason: format!("pyramid shapes differ: {:?} vs {:?}", o.dims(), bg.dims()),
            });
        }
        let (mo, so) = local_stats(o, omega)?;
        let (mb, sb) = local_stats(bg, omega)?;
        let term = ((mo - mb)?.abs()? + (so - sb)?.abs()?)?.mean_all()?;
        total = Some(match total {
            Some(acc) => (acc + term)?,
            None => term,
        });
    }
    Ok(total.expect("four layers"))
}

/// Squared forward differences over both axes and all channels, divided by `H * W`.
pub fn tv_loss(image: &Tensor) -> Result<Tensor> {
    let (b, _, h, w) = image.dims4()?;
    let mut per_sample = Tensor::zeros(b, image.dtype(), image.device())?;
    if w > 1 {
        let dx = (image.narrow(3, 1, w - 1)? - image.narrow(3, 0, w - 1)?)?;
        per_sample = (per_sample + dx.sqr()?.flatten_from(1)?.sum(1)?)?;
    }
    if h > 1 {
        let dy = (image.narrow(2, 1, h - 1)? - image.narrow(2, 0, h - 1)?)?;
        per_sample = (per_sample + dy.sqr()?.flatten_from(1)?.sum(1)?)?;
    }
    Ok((per_sample.mean(0)? / (h * w) as f64)?)
}

/// The four loss terms as scalar tensors.
#[derive(Debug, Clone)]
pub struct LossParts {
    pub im: Tensor,
    pub re: Tensor,
    pub bpa: Tensor,
    pub tv: Tensor,
}

/// Weighted sum of plain values; a non-finite part aborts naming the term.
pub fn combine(parts: [f64; 4], weights: &LossWeights) -> Result<LossReport> {
    let [im, re, bpa, tv] = parts;
    for (term, v) in [("im", im), ("re", re), ("bpa", bpa), ("tv", tv)] {
        if !v.is_finite() {
            return Err(Error::NonFinite { term, value: v });
        }
    }
    let total = weights.im * im + weights.re * re + weights.bpa * bpa + weights.tv * tv;
    Ok(LossReport { total, im, re, bpa, tv })
}

/// Differentiable total plus its report.
pub fn total_loss(parts: &LossParts, weights: &LossWeights) -> Result<(Tensor, LossReport)> {
    let report = combine(
        [scalar(&parts.im)?, scalar(&parts.re)?, scalar(&parts.bpa)?, scalar(&parts.tv)?],
        weights,
    )?;
    let total = ((((&parts.im * weights.im)? + (&parts.re * weights.re)?)? + (&parts.bpa * weights.bpa)?)?
        + (&parts.tv * weights.tv)?)?;
    Ok((total, report))
}
