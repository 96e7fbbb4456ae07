//! Inference: single and multi-object camouflage, mask-free dataset generation
//! and the timing harness.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::list_images;
use crate::decoder::embed;
use crate::encoder::{EncoderParams, LayerTag, DOWNSAMPLE};
use crate::error::{Error, Result};
use crate::image::{crop_region, paste_region, Image, Mask, RegionRect};
use crate::model::Model;
use crate::saliency::{spectral_residual, SaliencyMap};

/// A trained model bound to its encoder, ready for inference.
#[derive(Debug, Clone)]
pub struct Generator {
    pub encoder: EncoderParams,
    pub model: Model,
    device: Device,
}

/// Decoder output for one foreground/background pair, cropped back to the input size.
#[derive(Debug, Clone)]
pub struct Patch {
    pub output: Image,
    /// `(1, C, h, w)` foreground `relu4_1` features of the padded input.
    pub foreground_features: Tensor,
    /// `(1, 1, h, w)` structure similarity gate, for the PSF fusion.
    pub similarity: Option<Tensor>,
}

impl Generator {
    pub fn new(encoder: EncoderParams, model: Model, device: Device) -> Result<Self> {
        model.check_encoder(&encoder)?;
        Ok(Self { encoder, model, device })
    }

    /// Loads a checkpoint and the encoder it was trained against.
    pub fn load(checkpoint: impl AsRef<Path>, encoder: impl AsRef<Path>, device: Device) -> Result<Self> {
        let ck = Checkpoint::load(checkpoint, &device)?;
        let encoder = EncoderParams::load(encoder, ck.model.arch()?, &device)?;
        ck.verify_encoder(&encoder)?;
        Self::new(encoder, ck.to_model()?, device)
    }

    /// `(encoder, decoder)` forward passes so far.
    pub fn forward_counts(&self) -> (usize, usize) {
        (self.encoder.forward_count(), self.model.decoder.forward_count())
    }

    /// Runs the network on equally sized inputs, reflect-padding to a multiple
    /// of 8 and cropping the result back.
    pub fn generate(&self, fg: &Image, bg: &Image, mask: &Mask) -> Result<Patch> {
        let (h, w) = (fg.height(), fg.width());
        if (bg.height(), bg.width()) != (h, w) || (mask.height(), mask.width()) != (h, w) {
            return Err(Error::Dimension(format!(
                "foreground {h}x{w}, background {}x{} and mask {}x{} must match",
                bg.height(),
                bg.width(),
                mask.height(),
                mask.width()
            )));
        }
        let dev = &self.device;
        let fg_t = fg.pad_reflect_to_multiple(DOWNSAMPLE).to_tensor(DType::F32, dev)?;
        let bg_t = bg.pad_reflect_to_multiple(DOWNSAMPLE).to_tensor(DType::F32, dev)?;
        let mask_t = mask.pad_reflect_to_multiple(DOWNSAMPLE).to_tensor(DType::F32, dev)?;
        let g = self.model.generate(&self.encoder, &fg_t, &bg_t, &mask_t)?;
        let full = Image::from_tensor(&g.output)?;
        let output = if (full.height(), full.width()) == (h, w) { full } else { full.crop(RegionRect::new(0, 0, h, w))? };
        Ok(Patch {
            output,
            foreground_features: g.foreground.get(LayerTag::Relu4_1).clone(),
            similarity: g.similarity,
        })
    }

    /// Camouflages `fg` (with `mask`) into `background` with its top-left corner at `(top, left)`.
    pub fn camouflage(&self, fg: &Image, mask: &Mask, background: &Image, top: usize, left: usize) -> Result<(Image, Patch)> {
        let rect = RegionRect::new(top, left, fg.height(), fg.width());
        rect.check_inside(background.height(), background.width())?;
        let ib = crop_region(background, rect)?;
        let patch = self.generate(fg, &ib, mask)?;
        let ic = embed(&patch.output, &ib, mask)?;
        Ok((paste_region(background, &ic, rect)?, patch))
    }

    /// Applies requests in order, each on the previous result. Regions must be disjoint.
    pub fn camouflage_multi(&self, objects: &[Object], background: &Image) -> Result<Image> {
        for (i, a) in objects.iter().enumerate() {
            for (j, b) in objects.iter().enumerate().skip(i + 1) {
                if a.region().overlaps(&b.region()) {
                    return Err(Error::Conflict { first: i, second: j });
                }
            }
        }
        objects.iter().try_fold(background.clone(), |bg, o| {
            Ok(self.camouflage(&o.foreground, &o.mask, &bg, o.top, o.left)?.0)
        })
    }
}

/// One object of a multi-object request.
#[derive(Debug, Clone)]
pub struct Object {
    pub foreground: Image,
    pub mask: Mask,
    pub top: usize,
    pub left: usize,
}

impl Object {
    pub fn region(&self) -> RegionRect {
        RegionRect::new(self.top, self.left, self.foreground.height(), self.foreground.width())
    }
}

/// A line of a multi-object request file; paths are relative to the file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub fg: PathBuf,
    pub mask: PathBuf,
    pub top: usize,
    pub left: usize,
}

/// Reads a JSONL request file and the images it references.
pub fn load_objects(spec: impl AsRef<Path>) -> Result<Vec<Object>> {
    let spec = spec.as_ref();
    let base = spec.parent().unwrap_or(Path::new("."));
    let text = std::fs::read_to_string(spec)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let s: ObjectSpec = serde_json::from_str(line)?;
            Ok(Object {
                foreground: Image::load(base.join(&s.fg))?,
                mask: Mask::load(base.join(&s.mask))?,
                top: s.top,
                left: s.left,
            })
        })
        .collect()
}

/// Writes the min-max normalized saliency of the foreground features, upsampled to `size`.
pub fn dump_saliency(patch: &Patch, window: usize, size: (usize, usize), path: impl AsRef<Path>) -> Result<SaliencyMap> {
    let s = spectral_residual(&patch.foreground_features, window)?;
    s.save_png(path, Some(size))?;
    Ok(s)
}

/// Writes the similarity gate as a grayscale PNG (nearest upsampling to `size`).
pub fn dump_similarity(patch: &Patch, size: (usize, usize), path: impl AsRef<Path>) -> Result<()> {
    let sim = patch
        .similarity
        .as_ref()
        .ok_or_else(|| Error::Parameter("similarity is only defined for the psf fusion".into()))?;
    let (_, _, h, w) = sim.dims4()?;
    let values: Vec<f64> = sim.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let map = SaliencyMap::new(h, w, values.iter().map(|v| v.clamp(0.0, 1.0)).collect(), true)?;
    let (th, tw) = size;
    let up: Vec<f64> = (0..th * tw)
        .map(|i| map.get(crate::resample::nearest_index(i / tw, h, th), crate::resample::nearest_index(i % tw, w, tw)))
        .collect();
    SaliencyMap::new(th, tw, up, true)?.save_png(path, None)
}

/// Places equally tall images side by side with `gap` white columns between them.
pub fn panel(images: &[&Image], gap: usize) -> Result<Image> {
    let h = images.first().map(|i| i.height()).ok_or_else(|| Error::Parameter("empty panel".into()))?;
    if images.iter().any(|i| i.height() != h) {
        return Err(Error::Dimension("panel images must share a height".into()));
    }
    let w = images.iter().map(|i| i.width()).sum::<usize>() + gap * (images.len() - 1);
    let mut canvas = Image::filled(h, w, 1.0)?;
    let mut left = 0;
    for img in images {
        canvas = paste_region(&canvas, img, RegionRect::new(0, left, h, img.width()))?;
        left += img.width() + gap;
    }
    Ok(canvas)
}

/// One generated image of the mask-free dataset mode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub fg: PathBuf,
    pub bg: PathBuf,
    pub label: String,
    pub seed: u64,
    pub out: PathBuf,
}

/// Foregrounds in `dir` are labelled by their file stem; foregrounds in a
/// subdirectory `dir/<label>/` carry that subdirectory's name.
pub fn labelled_foregrounds(dir: &Path) -> Result<Vec<(PathBuf, String)>> {
    const EXTS: [&str; 3] = ["png", "jpg", "jpeg"];
    let mut out: Vec<(PathBuf, String)> = list_images(dir, &EXTS)?
        .into_iter()
        .map(|p| {
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            (p, stem)
        })
        .collect();
    let mut subdirs: Vec<PathBuf> =
        std::fs::read_dir(dir)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
    subdirs.sort();
    for sub in subdirs {
        let label = sub.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        out.extend(list_images(&sub, &EXTS)?.into_iter().map(|p| (p, label.clone())));
    }
    if out.is_empty() {
        return Err(Error::Dataset(format!("no foreground images under {}", dir.display())));
    }
    Ok(out)
}

/// Mask-free generation: foreground and background resized to `size x size`, an
/// all-ones mask, and the decoder output written as is (no embedding step).
/// Writes `<index>.png` files and `manifest.jsonl` into `out_dir`.
pub fn dataset_generate(
    generator: &Generator,
    fg_dir: &Path,
    bg_dir: &Path,
    out_dir: &Path,
    count: usize,
    seed: u64,
    size: usize,
) -> Result<Vec<ManifestRow>> {
    if size == 0 {
        return Err(Error::Parameter("output size must be positive".into()));
    }
    let foregrounds = labelled_foregrounds(fg_dir)?;
    let backgrounds = list_images(bg_dir, &["png", "jpg", "jpeg"])?;
    if backgrounds.is_empty() {
        return Err(Error::Dataset(format!("no background images under {}", bg_dir.display())));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask = Mask::filled(size, size, true)?;
    let mut rows = Vec::with_capacity(count);
    for k in 0..count {
        let (fg_path, label) = &foregrounds[rng.random_range(0..foregrounds.len())];
        let bg_path = &backgrounds[rng.random_range(0..backgrounds.len())];
        let fg = Image::load(fg_path)?.resize_bilinear(size, size)?;
        let bg = Image::load(bg_path)?.resize_bilinear(size, size)?;
        let io = generator.generate(&fg, &bg, &mask)?.output;
        let out = out_dir.join(format!("{k:06}.png"));
        io.save_png(&out)?;
        rows.push(ManifestRow { fg: fg_path.clone(), bg: bg_path.clone(), label: label.clone(), seed, out });
    }
    let mut manifest = std::fs::File::create(out_dir.join("manifest.jsonl"))?;
    for row in &rows {
        writeln!(manifest, "{}", serde_json::to_string(row)?)?;
    }
    Ok(rows)
}

/// Timing of full camouflage passes at one resolution.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub height: usize,
    pub width: usize,
    pub runs: usize,
    pub median_seconds: f64,
    /// Encoder and decoder forwards per generation (expected: 1 each).
    pub encoder_forwards: f64,
    pub decoder_forwards: f64,
}

/// Synthetic inputs of the given size: noise foreground, disc mask, smooth background.
pub fn synthetic_request(height: usize, width: usize, seed: u64) -> Result<(Image, Mask, Image)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = height * width;
    let fg = Image::new(height, width, (0..3 * n).map(|_| rng.random::<f32>()).collect())?;
    let (cy, cx, r) = (height as f64 / 2.0, width as f64 / 2.0, height.min(width) as f64 / 3.0);
    let mask = Mask::new(
        height,
        width,
        (0..n).map(|i| u8::from(((i / width) as f64 - cy).hypot((i % width) as f64 - cx) < r)).collect(),
    )?;
    let bg = Image::new(
        height,
        width,
        (0..3 * n).map(|i| ((i % n) % width) as f32 / width as f32 * (1.0 - 0.2 * (i / n) as f32)).collect(),
    )?;
    Ok((fg, mask, bg))
}

/// Median-of-`runs` wall clock for one full camouflage pass per size.
pub fn benchmark(generator: &Generator, sizes: &[(usize, usize)], runs: usize) -> Result<Vec<BenchRow>> {
    if runs == 0 {
        return Err(Error::Parameter("benchmark needs at least one run".into()));
    }
    sizes
        .iter()
        .map(|&(h, w)| {
            let (fg, mask, bg) = synthetic_request(h, w, 0)?;
            let before = generator.forward_counts();
            let mut times = Vec::with_capacity(runs);
            for _ in 0..runs {
                let start = Instant::now();
                generator.camouflage(&fg, &mask, &bg, 0, 0)?;
                times.push(start.elapsed().as_secs_f64());
            }
            let after = generator.forward_counts();
            times.sort_by(f64::total_cmp);
            Ok(BenchRow {
                height: h,
                width: w,
                runs,
                median_seconds: times[runs / 2],
                encoder_forwards: (after.0 - before.0) as f64 / runs as f64,
                decoder_forwards: (after.1 - before.1) as f64 / runs as f64,
            })
        })
        .collect()
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("height,width,runs,median_seconds,encoder_forwards,decoder_forwards\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{:.6},{},{}\n",
            r.height, r.width, r.runs, r.median_seconds, r.encoder_forwards, r.decoder_forwards
        ));
    }
    s
}
