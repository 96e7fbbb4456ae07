//! Pixel-space containers: RGB images in `[0, 1]`, binary masks and
//! rectangular regions of a larger background.

use std::fmt;
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::resample::{bilinear_plane, nearest_plane, reflect_index};

/// An RGB image stored planar (channel-major, then row-major), values in `[0, 1]`.
#[derive(Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl fmt::Debug for Image {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Image({}x{})", self.height, self.width)
    }
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Dimension(format!("image must be non-empty, got {height}x{width}")));
        }
        if data.len() != Self::CHANNELS * height * width {
            return Err(Error::Dimension(format!(
                "expected {} values for a {height}x{width} RGB image, got {}",
                Self::CHANNELS * height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Parameter(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(height, width, vec![value; Self::CHANNELS * height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Decodes an 8-bit PNG/JPEG file; grayscale inputs are replicated to three channels.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let decoded = image::open(path).map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_rgb8(&decoded.to_rgb8())
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Result<Self> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        if w == 0 || h == 0 {
            return Err(Error::Dimension("zero-size image".into()));
        }
        let n = h * w;
        let mut data = vec![0f32; 3 * n];
        for (i, px) in img.pixels().enumerate() {
            for c in 0..3 {
                data[c * n + i] = f32::from(px[c]) / 255.0;
            }
        }
        Ok(Self { height: h, width: w, data })
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let n = self.height * self.width;
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let i = y as usize * self.width + x as usize;
            image::Rgb(std::array::from_fn(|c| quantize(self.data[c * n + i])))
        })
    }

    /// Gray image with white where the mask is set.
    pub fn from_mask(mask: &Mask) -> Self {
        let plane: Vec<f32> = mask.data().iter().map(|&v| f32::from(v)).collect();
        Self { height: mask.height(), width: mask.width(), data: plane.repeat(3) }
    }

    /// Writes a lossless PNG.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        save_png(&image::DynamicImage::ImageRgb8(self.to_rgb8()), path.as_ref())
    }

    pub fn resize_bilinear(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Dimension(format!("resize target {height}x{width} is empty")));
        }
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            let plane: Vec<f64> = self.plane(c).iter().map(|&v| f64::from(v)).collect();
            let out = bilinear_plane(&plane, self.height, self.width, height, width);
            data.extend(out.into_iter().map(|v| (v as f32).clamp(0.0, 1.0)));
        }
        Ok(Self { height, width, data })
    }

    pub fn crop(&self, rect: RegionRect) -> Result<Self> {
        rect.check_inside(self.height, self.width)?;
        let mut data = Vec::with_capacity(3 * rect.height * rect.width);
        for c in 0..3 {
            let plane = self.plane(c);
            for y in rect.top..rect.top + rect.height {
                let row = &plane[y * self.width..(y + 1) * self.width];
                data.extend_from_slice(&row[rect.left..rect.left + rect.width]);
            }
        }
        Ok(Self { height: rect.height, width: rect.width, data })
    }

    /// Reflect-pads on the bottom and right so both sides become multiples of `multiple`.
    pub fn pad_reflect_to_multiple(&self, multiple: usize) -> Self {
        let (ph, pw) = (round_up(self.height, multiple), round_up(self.width, multiple));
        if (ph, pw) == (self.height, self.width) {
            return self.clone();
        }
        let planes = (0..3).flat_map(|c| reflect_pad_plane(self.plane(c), self.height, self.width, ph, pw));
        Self { height: ph, width: pw, data: planes.collect() }
    }

    /// True if every pixel has channel values within 1/255 of each other.
    pub fn is_gray(&self) -> bool {
        let n = self.height * self.width;
        let tol = 1.0 / 255.0;
        (0..n).all(|i| {
            let (r, g, b) = (self.data[i], self.data[n + i], self.data[2 * n + i]);
            (r - g).abs() < tol && (g - b).abs() < tol && (r - b).abs() < tol
        })
    }

    /// `(1, 3, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, (1, 3, self.height, self.width), device)?.to_dtype(dtype)?)
    }

    /// Accepts `(3, H, W)` or `(1, 3, H, W)`; values are clamped into `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = if t.rank() == 4 { t.squeeze(0)? } else { t.clone() };
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(Error::Dimension(format!("expected 3 channels, got {c}")));
        }
        let data: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        let data = data.into_iter().map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }).collect();
        Self::new(h, w, data)
    }
}

/// A binary mask, row-major, values in `{0, 1}`.
#[derive(Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl fmt::Debug for Mask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Mask({}x{}, {} set)", self.height, self.width, self.count_ones())
    }
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Dimension(format!("mask must be non-empty, got {height}x{width}")));
        }
        if data.len() != height * width {
            return Err(Error::Dimension(format!(
                "expected {} values for a {height}x{width} mask, got {}",
                height * width,
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Parameter("mask values must be 0 or 1".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Result<Self> {
        Self::new(height, width, vec![u8::from(value); height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    /// Decodes an image file and thresholds its luma at 127 (strictly greater is set).
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let decoded = image::open(path).map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_luma8(&decoded.to_luma8())
    }

    pub fn from_luma8(img: &image::GrayImage) -> Result<Self> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        if w == 0 || h == 0 {
            return Err(Error::Dimension("zero-size mask".into()));
        }
        let data = img.pixels().map(|p| u8::from(p[0] > 127)).collect();
        Ok(Self { height: h, width: w, data })
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let img = image::GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([self.data[y as usize * self.width + x as usize] * 255])
        });
        save_png(&image::DynamicImage::ImageLuma8(img), path.as_ref())
    }

    pub fn resize_nearest(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Dimension(format!("resize target {height}x{width} is empty")));
        }
        let data = nearest_plane(&self.data, self.height, self.width, height, width);
        Ok(Self { height, width, data })
    }

    pub fn crop(&self, rect: RegionRect) -> Result<Self> {
        rect.check_inside(self.height, self.width)?;
        let data = (rect.top..rect.top + rect.height)
            .flat_map(|y| &self.data[y * self.width + rect.left..y * self.width + rect.left + rect.width])
            .copied()
            .collect();
        Ok(Self { height: rect.height, width: rect.width, data })
    }

    pub fn pad_reflect_to_multiple(&self, multiple: usize) -> Self {
        let (ph, pw) = (round_up(self.height, multiple), round_up(self.width, multiple));
        let data = reflect_pad_plane(&self.data, self.height, self.width, ph, pw);
        Self { height: ph, width: pw, data }
    }

    /// `(1, 1, H, W)` tensor of zeros and ones.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, (1, 1, self.height, self.width), device)?.to_dtype(dtype)?)
    }
}

/// A rectangle of pixels inside a larger image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RegionRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl fmt::Display for RegionRect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}@({},{})", self.height, self.width, self.top, self.left)
    }
}

impl RegionRect {
    pub fn new(top: usize, left: usize, height: usize, width: usize) -> Self {
        Self { top, left, height, width }
    }

    pub fn check_inside(&self, height: usize, width: usize) -> Result<()> {
        let fits = self.height > 0
            && self.width > 0
            && self.top.checked_add(self.height).is_some_and(|b| b <= height)
            && self.left.checked_add(self.width).is_some_and(|r| r <= width);
        if fits {
            Ok(())
        } else {
            Err(Error::OutOfBounds { rect: self.to_string(), height, width })
        }
    }

    pub fn overlaps(&self, other: &RegionRect) -> bool {
        self.top < other.top + other.height
            && other.top < self.top + self.height
            && self.left < other.left + other.width
            && other.left < self.left + self.width
    }
}

/// Copies `rect` out of `bg_full`.
pub fn crop_region(bg_full: &Image, rect: RegionRect) -> Result<Image> {
    bg_full.crop(rect)
}

/// Returns `bg_full` with `rect` overwritten by `patch`.
pub fn paste_region(bg_full: &Image, patch: &Image, rect: RegionRect) -> Result<Image> {
    if patch.height != rect.height || patch.width != rect.width {
        return Err(Error::Dimension(format!(
            "patch is {}x{} but region is {}",
            patch.height, patch.width, rect
        )));
    }
    rect.check_inside(bg_full.height, bg_full.width)?;
    let mut out = bg_full.clone();
    let (h, w) = (bg_full.height, bg_full.width);
    for c in 0..3 {
        let src = patch.plane(c);
        for y in 0..rect.height {
            let dst = (c * h + rect.top + y) * w + rect.left;
            out.data[dst..dst + rect.width].copy_from_slice(&src[y * rect.width..(y + 1) * rect.width]);
        }
    }
    Ok(out)
}

fn round_up(n: usize, multiple: usize) -> usize {
    n.div_ceil(multiple) * multiple
}

fn reflect_pad_plane<T: Copy>(src: &[T], h: usize, w: usize, ph: usize, pw: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(ph * pw);
    for y in 0..ph {
        let sy = reflect_index(y as isize, h);
        out.extend((0..pw).map(|x| src[sy * w + reflect_index(x as isize, w)]));
    }
    out
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn save_png(img: &image::DynamicImage, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}
