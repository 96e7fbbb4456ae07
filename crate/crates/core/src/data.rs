//! Training-pair assembly and dataset discovery.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::Rng;

use crate::error::{Error, Result};
use crate::image::{Image, Mask, RegionRect};

/// Sizes used when building a training pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleGeometry {
    /// Side of the square foreground, mask and background crop.
    pub size: usize,
    /// Side the background is resized to before cropping.
    pub background_resize: usize,
}

impl Default for SampleGeometry {
    fn default() -> Self {
        Self { size: 256, background_resize: 512 }
    }
}

/// One foreground/mask/background triple, all `size x size`.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub foreground: Image,
    pub mask: Mask,
    pub background: Image,
}

impl TrainSample {
    /// Builds a sample with an explicit background crop origin (in resized coordinates).
    pub fn from_parts(
        fg: &Image,
        mask: &Mask,
        bg: &Image,
        geometry: SampleGeometry,
        crop: (usize, usize),
    ) -> Result<Self> {
        let SampleGeometry { size, background_resize } = geometry;
        if background_resize < size {
            return Err(Error::Parameter(format!(
                "background resize {background_resize} is smaller than sample size {size}"
            )));
        }
        let foreground = fg.resize_bilinear(size, size)?;
        let mask = mask.resize_nearest(size, size)?;
        if mask.count_ones() == 0 {
            return Err(Error::DegenerateMask);
        }
        let background = bg
            .resize_bilinear(background_resize, background_resize)?
            .crop(RegionRect::new(crop.0, crop.1, size, size))?;
        Ok(Self { foreground, mask, background })
    }

    pub fn size(&self) -> usize {
        self.foreground.height()
    }
}

/// Resizes foreground and mask, resizes the background and takes a uniformly
/// random crop. Deterministic given the state of `rng`.
pub fn make_train_sample<R: Rng>(
    fg: &Image,
    mask: &Mask,
    bg: &Image,
    geometry: SampleGeometry,
    rng: &mut R,
) -> Result<TrainSample> {
    let span = geometry.background_resize.saturating_sub(geometry.size);
    let crop = (rng.random_range(0..=span), rng.random_range(0..=span));
    TrainSample::from_parts(fg, mask, bg, geometry, crop)
}

/// Stacked tensors for a batch of samples.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `(B, 3, H, W)`
    pub foreground: Tensor,
    /// `(B, 1, H, W)`
    pub mask: Tensor,
    /// `(B, 3, H, W)`
    pub background: Tensor,
}

impl Batch {
    pub fn from_samples(samples: &[TrainSample], dtype: DType, device: &Device) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Parameter("empty batch".into()));
        }
        let size = samples[0].size();
        if samples.iter().any(|s| s.size() != size) {
            return Err(Error::Dimension("batch samples differ in size".into()));
        }
        let stack = |f: &dyn Fn(&TrainSample) -> Result<Tensor>| -> Result<Tensor> {
            let parts = samples.iter().map(f).collect::<Result<Vec<_>>>()?;
            Ok(Tensor::cat(&parts, 0)?)
        };
        Ok(Self {
            foreground: stack(&|s| s.foreground.to_tensor(dtype, device))?,
            mask: stack(&|s| s.mask.to_tensor(dtype, device))?,
            background: stack(&|s| s.background.to_tensor(dtype, device))?,
        })
    }

    pub fn len(&self) -> usize {
        self.foreground.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// File listing of a training corpus laid out as
/// `foregrounds/*.png`, `masks/<stem>.png`, `backgrounds/*.{png,jpg}`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub foregrounds: Vec<(PathBuf, PathBuf)>,
    pub backgrounds: Vec<PathBuf>,
}

impl Dataset {
    pub fn discover(root: impl AsRef<Path>, cull_gray: bool) -> Result<Self> {
        let root = root.as_ref();
        let foregrounds = list_images(&root.join("foregrounds"), &["png"])?
            .into_iter()
            .filter_map(|fg| {
                let stem = fg.file_stem()?.to_owned();
                let mask = root.join("masks").join(stem).with_extension("png");
                if mask.is_file() {
                    Some((fg, mask))
                } else {
                    log::warn!("skipping {}: no mask at {}", fg.display(), mask.display());
                    None
                }
            })
            .collect::<Vec<_>>();
        let mut backgrounds = list_images(&root.join("backgrounds"), &["png", "jpg", "jpeg"])?;
        if cull_gray {
            let before = backgrounds.len();
            backgrounds.retain(|p| match Image::load(p) {
                Ok(img) => !img.is_gray(),
                Err(e) => {
                    log::warn!("skipping background: {e}");
                    false
                }
            });
            log::info!("culled {} gray or unreadable backgrounds", before - backgrounds.len());
        }
        if foregrounds.is_empty() || backgrounds.is_empty() {
            return Err(Error::Dataset(format!(
                "{} has {} usable foregrounds and {} backgrounds",
                root.display(),
                foregrounds.len(),
                backgrounds.len()
            )));
        }
        Ok(Self { foregrounds, backgrounds })
    }

    /// Draws random foreground/background pairs until `count` non-degenerate samples exist.
    pub fn sample_batch<R: Rng>(
        &self,
        count: usize,
        geometry: SampleGeometry,
        rng: &mut R,
    ) -> Result<Vec<TrainSample>> {
        const MAX_REJECTIONS: usize = 1000;
        let mut out = Vec::with_capacity(count);
        let mut rejected = 0;
        while out.len() < count {
            let (fg_path, mask_path) = &self.foregrounds[rng.random_range(0..self.foregrounds.len())];
            let bg_path = &self.backgrounds[rng.random_range(0..self.backgrounds.len())];
            let fg = Image::load(fg_path)?;
            let mask = Mask::load(mask_path)?;
            let bg = Image::load(bg_path)?;
            match make_train_sample(&fg, &mask, &bg, geometry, rng) {
                Ok(s) => out.push(s),
                Err(Error::DegenerateMask) => {
                    rejected += 1;
                    if rejected > MAX_REJECTIONS {
                        return Err(Error::Dataset("too many degenerate masks".into()));
                    }
                }
                Err(e) => return Err(e),
            }
        }
        Ok(out)
    }
}

pub(crate) fn list_images(dir: &Path, extensions: &[&str]) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", dir.display())));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| extensions.iter().any(|x| x.eq_ignore_ascii_case(e)))
        })
        .collect();
    files.sort();
    Ok(files)
}
