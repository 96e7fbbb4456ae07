//! Spectral-residual saliency over a feature map.
//!
//! For every channel the log-amplitude spectrum is compared with its local
//! box-filtered average; the residual, recombined with the original phase
//! and transformed back, highlights the statistically unusual positions.
//! Channel responses are summed and min-max normalized.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::resample::bilinear_plane;

/// Box-filter side used on the log-amplitude spectrum.
pub const DEFAULT_WINDOW: usize = 3;

/// Guard inside `log(|F| + eps)` for empty spectra.
pub const LOG_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
    normalized: bool,
}

impl SaliencyMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>, normalized: bool) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::Dimension(format!(
                "saliency map {height}x{width} with {} values",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Parameter("saliency values must be finite and non-negative".into()));
        }
        Ok(Self { height, width, values, normalized })
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width], (0.0..=1.0).contains(&value))
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Min-max scaling to `[0, 1]`; a constant map becomes all zeros.
    pub fn normalize(mut self) -> Self {
        let (lo, hi) = self.values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let range = hi - lo;
        if range > 0.0 && range > hi.abs() * 1e-12 {
            self.values.iter_mut().for_each(|v| *v = (*v - lo) / range);
        } else {
            self.values.iter_mut().for_each(|v| *v = 0.0);
        }
        self.normalized = true;
        self
    }

    /// `(1, 1, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.values, (1, 1, self.height, self.width), device)?.to_dtype(dtype)?)
    }

    /// Grayscale PNG, optionally upscaled (bilinear) to `size`.
    pub fn save_png(&self, path: impl AsRef<Path>, size: Option<(usize, usize)>) -> Result<()> {
        let map = match size {
            Some((h, w)) => resize_saliency(self, h, w)?,
            None => self.clone(),
        };
        let hi = map.values.iter().cloned().fold(0.0, f64::max);
        let scale = if map.normalized || hi == 0.0 { 1.0 } else { 1.0 / hi };
        let img = image::GrayImage::from_fn(map.width as u32, map.height as u32, |x, y| {
            let v = map.values[y as usize * map.width + x as usize] * scale;
            image::Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
        });
        img.save_with_format(path.as_ref(), image::ImageFormat::Png).map_err(|e| Error::Decode {
            path: path.as_ref().to_path_buf(),
            reason: e.to_string(),
        })
    }
}

/// Saliency of one sample's features given as `C` planes of `h * w` values.
///
/// Spatially constant channels carry no spectral residual and are skipped.
/// Per-position channel terms are summed in sorted order, which makes the
/// result independent of channel order bit for bit.
pub fn spectral_residual_planes(planes: &[Vec<f64>], h: usize, w: usize, n: usize) -> Result<SaliencyMap> {
    if n.is_multiple_of(2) {
        return Err(Error::Parameter(format!("spectral residual window must be odd, got {n}")));
    }
    if h == 0 || w == 0 {
        return Err(Error::Dimension("empty feature map".into()));
    }
    let mut planner = FftPlanner::<f64>::new();
    let mut terms: Vec<Vec<f64>> = Vec::with_capacity(planes.len());
    let mut buf = vec![Complex::new(0.0, 0.0); h * w];
    for plane in planes {
        if plane.len() != h * w {
            return Err(Error::Dimension(format!("plane of {} values for a {h}x{w} grid", plane.len())));
        }
        let first = plane[0];
        if plane.iter().all(|&v| v == first) {
            continue;
        }
        buf.iter_mut().zip(plane).for_each(|(b, &v)| *b = Complex::new(v, 0.0));
        fft2d(&mut planner, &mut buf, h, w, false);
        let log_amp: Vec<f64> = buf.iter().map(|c| (c.norm() + LOG_EPS).ln()).collect();
        let smoothed = box_filter_replicate(&log_amp, h, w, n);
        for ((b, la), sm) in buf.iter_mut().zip(&log_amp).zip(&smoothed) {
            let phase = b.im.atan2(b.re);
            *b = Complex::from_polar((la - sm).exp(), phase);
        }
        fft2d(&mut planner, &mut buf, h, w, true);
        terms.push(buf.iter().map(|b| b.norm_sqr()).collect());
    }
    let mut column = Vec::with_capacity(terms.len());
    let acc = (0..h * w)
        .map(|i| {
            column.clear();
            column.extend(terms.iter().map(|t| t[i]));
            column.sort_by(f64::total_cmp);
            column.iter().sum()
        })
        .collect();
    Ok(SaliencyMap::new(h, w, acc, false)?.normalize())
}

/// Saliency from a `(C, H, W)` or `(1, C, H, W)` feature tensor.
pub fn spectral_residual(features: &Tensor, n: usize) -> Result<SaliencyMap> {
    let f = if features.rank() == 4 { features.squeeze(0)? } else { features.clone() };
    let (c, h, w) = f.dims3()?;
    let flat: Vec<f64> = f.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let planes: Vec<Vec<f64>> = (0..c).map(|k| flat[k * h * w..(k + 1) * h * w].to_vec()).collect();
    spectral_residual_planes(&planes, h, w, n)
}

/// Per-sample saliency for a `(B, C, H, W)` batch, stacked to `(B, 1, H, W)`.
pub fn batch_saliency(features: &Tensor, n: usize) -> Result<Tensor> {
    let b = features.dim(0)?;
    let maps = (0..b)
        .map(|i| spectral_residual(&features.get(i)?, n)?.to_tensor(features.dtype(), features.device()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&maps, 0)?)
}

/// Bilinear resize with values clamped into `[0, 1]`.
pub fn resize_saliency(s: &SaliencyMap, height: usize, width: usize) -> Result<SaliencyMap> {
    if height == 0 || width == 0 {
        return Err(Error::Dimension(format!("saliency resize target {height}x{width} is empty")));
    }
    let mut values = bilinear_plane(&s.values, s.height, s.width, height, width);
    if s.normalized {
        values.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
    Ok(SaliencyMap { height, width, values, normalized: s.normalized })
}

/// Bilinear resize of a `(B, 1, h, w)` saliency tensor (no gradient).
pub fn resize_saliency_tensor(s: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (b, _, h, w) = s.dims4()?;
    if (h, w) == (height, width) {
        return Ok(s.clone());
    }
    let flat: Vec<f64> = s.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let mut out = Vec::with_capacity(b * height * width);
    for i in 0..b {
        let plane = &flat[i * h * w..(i + 1) * h * w];
        out.extend(bilinear_plane(plane, h, w, height, width).into_iter().map(|v| v.clamp(0.0, 1.0)));
    }
    Ok(Tensor::from_vec(out, (b, 1, height, width), s.device())?.to_dtype(s.dtype())?)
}

fn fft2d(planner: &mut FftPlanner<f64>, data: &mut [Complex<f64>], h: usize, w: usize, inverse: bool) {
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    for row in data.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = data[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            data[y * w + x] = col[y];
        }
    }
    if inverse {
        let scale = 1.0 / (h * w) as f64;
        data.iter_mut().for_each(|v| *v *= scale);
    }
}

/// `n x n` mean filter with replicate padding.
pub(crate) fn box_filter_replicate(src: &[f64], h: usize, w: usize, n: usize) -> Vec<f64> {
    let r = (n / 2) as isize;
    let clamp = |v: isize, len: usize| v.clamp(0, len as isize - 1) as usize;
    let mut horiz = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            horiz[y * w + x] = (-r..=r).map(|d| src[y * w + clamp(x as isize + d, w)]).sum();
        }
    }
    let norm = (n * n) as f64;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (-r..=r).map(|d| horiz[clamp(y as isize + d, h) * w + x]).sum::<f64>() / norm;
        }
    }
    out
}
