//! Frozen VGG-19 feature extractor up to `relu4_1`.
//!
//! The encoder exposes the four taps consumed by fusion and the losses:
//! `relu1_1`, `relu2_1`, `relu3_1` and `relu4_1`, at downsample factors
//! 1, 2, 4 and 8. Weights are plain (non-variable) tensors, so autograd
//! flows through the encoder to its input but never into its parameters.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{hash_tensors, Archive};
use crate::error::{Error, Result};
use crate::params::ForwardCounter;
use crate::tensor_ops::{channel_moments, conv2d, normal_tensor};

/// Variance regularizer used by every statistic in the crate.
pub const STAT_EPS: f64 = 1e-5;

/// Total spatial downsampling of the encoder.
pub const DOWNSAMPLE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LayerTag {
    Relu1_1,
    Relu2_1,
    Relu3_1,
    Relu4_1,
}

impl LayerTag {
    pub const ALL: [LayerTag; 4] = [LayerTag::Relu1_1, LayerTag::Relu2_1, LayerTag::Relu3_1, LayerTag::Relu4_1];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn downsample(self) -> usize {
        1 << self.index()
    }

    pub fn name(self) -> &'static str {
        ["relu1_1", "relu2_1", "relu3_1", "relu4_1"][self.index()]
    }
}

impl fmt::Display for LayerTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Channel widths of the four VGG blocks, `base * (1, 2, 4, 8)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub base_width: usize,
}

impl Default for Arch {
    fn default() -> Self {
        Self::CANONICAL
    }
}

impl Arch {
    pub const CANONICAL: Arch = Arch { base_width: 64 };

    pub fn new(base_width: usize) -> Result<Self> {
        if base_width == 0 {
            return Err(Error::Parameter("base width must be positive".into()));
        }
        Ok(Self { base_width })
    }

    pub fn channels(&self, tag: LayerTag) -> usize {
        self.base_width << tag.index()
    }

    /// Feature channels at `relu4_1`, i.e. the width fused by the PSF module.
    pub fn fused_channels(&self) -> usize {
        self.channels(LayerTag::Relu4_1)
    }

    /// `(name, out_channels, in_channels)` of each 3x3 convolution, in order.
    pub fn encoder_layers(&self) -> Vec<(&'static str, usize, usize)> {
        let [w1, w2, w3, w4] = LayerTag::ALL.map(|t| self.channels(t));
        vec![
            ("conv1_1", w1, 3),
            ("conv1_2", w1, w1),
            ("conv2_1", w2, w1),
            ("conv2_2", w2, w2),
            ("conv3_1", w3, w2),
            ("conv3_2", w3, w3),
            ("conv3_3", w3, w3),
            ("conv3_4", w3, w3),
            ("conv4_1", w4, w3),
        ]
    }
}

/// Pixel normalization applied before the first convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preprocess {
    /// RGB in `[0, 1]`, standardized with the ImageNet mean/std.
    #[default]
    Imagenet,
    /// BGR in `[0, 255]` with the ImageNet mean subtracted.
    Caffe,
}

impl Preprocess {
    pub fn tag(self) -> &'static str {
        match self {
            Preprocess::Imagenet => "imagenet",
            Preprocess::Caffe => "caffe",
        }
    }

    fn apply(self, x: &Tensor) -> Result<Tensor> {
        let (dtype, device) = (x.dtype(), x.device());
        let per_channel = |v: [f64; 3]| -> Result<Tensor> {
            Ok(Tensor::new(&v, device)?.to_dtype(dtype)?.reshape((1, 3, 1, 1))?)
        };
        Ok(match self {
            Preprocess::Imagenet => x
                .broadcast_sub(&per_channel([0.485, 0.456, 0.406])?)?
                .broadcast_div(&per_channel([0.229, 0.224, 0.225])?)?,
            Preprocess::Caffe => {
                let bgr = x.index_select(&Tensor::new(&[2u32, 1, 0], device)?, 1)?;
                (bgr * 255.0)?.broadcast_sub(&per_channel([103.939, 116.779, 123.68])?)?
            }
        })
    }
}

impl FromStr for Preprocess {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "imagenet" => Ok(Preprocess::Imagenet),
            "caffe" => Ok(Preprocess::Caffe),
            other => Err(Error::Schema { name: "preprocess".into(), reason: format!("unknown convention `{other}`") }),
        }
    }
}

#[derive(Debug, Clone)]
struct FrozenConv {
    name: &'static str,
    weight: Tensor,
    bias: Tensor,
}

/// Immutable VGG-19 weights through `conv4_1`.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    arch: Arch,
    preprocess: Preprocess,
    layers: Vec<FrozenConv>,
    forwards: ForwardCounter,
}

/// Encoder outputs at the four taps, each `(B, C, H/f, W/f)`.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    maps: [Tensor; 4],
}

impl FeaturePyramid {
    pub fn new(maps: [Tensor; 4]) -> Self {
        Self { maps }
    }

    pub fn get(&self, tag: LayerTag) -> &Tensor {
        &self.maps[tag.index()]
    }

    pub fn iter(&self) -> impl Iterator<Item = (LayerTag, &Tensor)> {
        LayerTag::ALL.into_iter().zip(self.maps.iter())
    }

    pub fn detach(&self) -> Self {
        Self { maps: self.maps.clone().map(|m| m.detach()) }
    }

    /// Splits along the batch axis at `at`.
    pub fn split_batch(&self, at: usize) -> Result<(Self, Self)> {
        let mut head = Vec::with_capacity(4);
        let mut tail = Vec::with_capacity(4);
        for m in &self.maps {
            let n = m.dim(0)?;
            head.push(m.narrow(0, 0, at)?);
            tail.push(m.narrow(0, at, n - at)?);
        }
        let arr = |v: Vec<Tensor>| -> [Tensor; 4] { v.try_into().expect("four taps") };
        Ok((Self::new(arr(head)), Self::new(arr(tail))))
    }
}

impl EncoderParams {
    /// Reads `convK_J.weight` / `convK_J.bias` tensors and checks them against `arch`.
    pub fn load(path: impl AsRef<Path>, arch: Arch, device: &Device) -> Result<Self> {
        let archive = Archive::load(path, device)?;
        Self::from_archive(&archive, arch)
    }

    pub fn from_archive(archive: &Archive, arch: Arch) -> Result<Self> {
        let preprocess = match archive.meta("preprocess") {
            Some(tag) => tag.parse()?,
            None => Preprocess::default(),
        };
        let mut layers = Vec::new();
        for (name, cout, cin) in arch.encoder_layers() {
            let fetch = |suffix: &str, expect: &[usize]| -> Result<Tensor> {
                let key = format!("{name}.{suffix}");
                let t = archive
                    .get(&key)
                    .ok_or_else(|| Error::Schema { name: key.clone(), reason: "missing tensor".into() })?;
                if t.dims() != expect {
                    return Err(Error::Schema {
                        name: key,
                        reason: format!("expected shape {expect:?}, found {:?}", t.dims()),
                    });
                }
                Ok(t.to_dtype(DType::F32)?)
            };
            layers.push(FrozenConv {
                name,
                weight: fetch("weight", &[cout, cin, 3, 3])?,
                bias: fetch("bias", &[cout])?,
            });
        }
        Ok(Self { arch, preprocess, layers, forwards: ForwardCounter::default() })
    }

    /// Kaiming-initialized weights; a stand-in when no pretrained snapshot is available.
    pub fn random(arch: Arch, seed: u64, device: &Device) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = arch
            .encoder_layers()
            .into_iter()
            .map(|(name, cout, cin)| {
                let std = (2.0 / (cin * 9) as f64).sqrt();
                Ok(FrozenConv {
                    name,
                    weight: normal_tensor(&[cout, cin, 3, 3], std, &mut rng, DType::F32, device)?,
                    bias: Tensor::zeros(cout, DType::F32, device)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { arch, preprocess: Preprocess::default(), layers, forwards: ForwardCounter::default() })
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::default();
        for l in &self.layers {
            a.insert(format!("{}.weight", l.name), &l.weight);
            a.insert(format!("{}.bias", l.name), &l.bias);
        }
        a.metadata.insert("preprocess".into(), self.preprocess.tag().into());
        a.metadata.insert("base_width".into(), self.arch.base_width.to_string());
        a
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn preprocess(&self) -> Preprocess {
        self.preprocess
    }

    pub fn with_preprocess(mut self, preprocess: Preprocess) -> Self {
        self.preprocess = preprocess;
        self
    }

    pub fn num_kernels(&self) -> usize {
        self.layers.len()
    }

    /// SHA-256 of all weights; stable across runs as long as the weights do not change.
    pub fn weights_hash(&self) -> Result<String> {
        let names: Vec<(String, &Tensor)> = self
            .layers
            .iter()
            .flat_map(|l| [(format!("{}.weight", l.name), &l.weight), (format!("{}.bias", l.name), &l.bias)])
            .collect();
        hash_tensors(names.iter().map(|(n, t)| (n.as_str(), *t)))
    }

    /// Casts the weights, e.g. to `F64` for gradient checks.
    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                Ok(FrozenConv { name: l.name, weight: l.weight.to_dtype(dtype)?, bias: l.bias.to_dtype(dtype)? })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers, ..self.clone() })
    }

    /// Number of `encode` calls so far (shared with clones).
    pub fn forward_count(&self) -> usize {
        self.forwards.get()
    }

    /// `images`: `(B, 3, H, W)` in `[0, 1]` with `H` and `W` multiples of 8.
    pub fn encode(&self, images: &Tensor) -> Result<FeaturePyramid> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 {
            return Err(Error::Dimension(format!("encoder expects 3 input channels, got {c}")));
        }
        if h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 {
            return Err(Error::Dimension(format!("encoder input {h}x{w} is not a multiple of {DOWNSAMPLE}")));
        }
        self.forwards.bump();
        let dtype = self.layers[0].weight.dtype();
        let mut x = self.preprocess.apply(&images.to_dtype(dtype)?)?;
        let mut taps = Vec::with_capacity(4);
        for layer in &self.layers {
            x = conv2d(&x, &layer.weight, &layer.bias)?.relu()?;
            match layer.name {
                "conv1_1" | "conv2_1" | "conv3_1" | "conv4_1" => taps.push(x.clone()),
                "conv1_2" | "conv2_2" | "conv3_4" => x = x.max_pool2d(2)?,
                _ => {}
            }
        }
        Ok(FeaturePyramid::new(taps.try_into().expect("four taps")))
    }
}

/// Per-sample, per-channel standardization to zero mean and unit (population) variance.
pub fn mean_var_normalize(x: &Tensor) -> Result<Tensor> {
    let (mean, var) = channel_moments(x)?;
    let std = (var + STAT_EPS)?.sqrt()?;
    Ok(x.broadcast_sub(&mean)?.broadcast_div(&std)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_ops::scalar;
    use candle_core::D;

    fn small() -> EncoderParams {
        EncoderParams::random(Arch::new(4).unwrap(), 7, &Device::Cpu).unwrap()
    }

    fn random_images(b: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        normal_tensor(&[b, 3, h, w], 0.25, &mut rng, DType::F32, &Device::Cpu)
            .unwrap()
            .affine(1.0, 0.5)
            .unwrap()
            .clamp(0.0, 1.0)
            .unwrap()
    }

    #[test]
    fn canonical_archive_has_nine_kernels_and_shapes() {
        let arch = Arch::CANONICAL;
        let layers = arch.encoder_layers();
        assert_eq!(layers.len(), 9);
        assert_eq!(LayerTag::ALL.map(|t| arch.channels(t)), [64, 128, 256, 512]);
        assert_eq!(LayerTag::ALL.map(|t| t.downsample()), [1, 2, 4, 8]);
    }

    #[test]
    fn archive_round_trip_and_schema_errors() {
        let enc = small();
        let archive = enc.to_archive();
        let back = EncoderParams::from_archive(&archive, enc.arch()).unwrap();
        assert_eq!(back.num_kernels(), 9);
        assert_eq!(back.weights_hash().unwrap(), enc.weights_hash().unwrap());

        let mut missing = enc.to_archive();
        missing.tensors.remove("conv3_2.weight");
        match EncoderParams::from_archive(&missing, enc.arch()) {
            Err(Error::Schema { name, .. }) => assert!(name.contains("conv3_2")),
            other => panic!("expected schema error, got {other:?}"),
        }

        let mut wrong = enc.to_archive();
        wrong.insert("conv2_1.weight", &Tensor::zeros((8, 5, 3, 3), DType::F32, &Device::Cpu).unwrap());
        assert!(matches!(EncoderParams::from_archive(&wrong, enc.arch()), Err(Error::Schema { .. })));

        // a scaled archive does not pass as canonical
        assert!(matches!(EncoderParams::from_archive(&archive, Arch::CANONICAL), Err(Error::Schema { .. })));
    }

    #[test]
    fn preprocess_tag_read_from_metadata() {
        let mut a = small().with_preprocess(Preprocess::Caffe).to_archive();
        assert_eq!(EncoderParams::from_archive(&a, Arch::new(4).unwrap()).unwrap().preprocess(), Preprocess::Caffe);
        a.metadata.remove("preprocess");
        assert_eq!(EncoderParams::from_archive(&a, Arch::new(4).unwrap()).unwrap().preprocess(), Preprocess::Imagenet);
    }

    #[test]
    fn pyramid_shapes_and_non_negativity() {
        let enc = small();
        let pyr = enc.encode(&random_images(2, 64, 64, 1)).unwrap();
        for (tag, m) in pyr.iter() {
            let f = tag.downsample();
            assert_eq!(m.dims(), &[2, enc.arch().channels(tag), 64 / f, 64 / f]);
            assert!(scalar(&m.flatten_all().unwrap().min(0).unwrap()).unwrap() >= 0.0);
        }
    }

    #[test]
    fn canonical_relu4_1_shape_at_256() {
        let enc = EncoderParams::random(Arch::CANONICAL, 0, &Device::Cpu).unwrap();
        let pyr = enc.encode(&random_images(1, 256, 256, 2)).unwrap();
        assert_eq!(pyr.get(LayerTag::Relu4_1).dims(), &[1, 512, 32, 32]);
    }

    #[test]
    fn unaligned_input_rejected() {
        let err = small().encode(&random_images(1, 20, 24, 0)).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn translation_by_eight_shifts_relu4_1_by_one_cell() {
        let enc = small();
        let big = random_images(1, 136, 136, 3);
        let a = big.narrow(2, 0, 128).unwrap().narrow(3, 0, 128).unwrap();
        let b = big.narrow(2, 8, 128).unwrap().narrow(3, 8, 128).unwrap();
        let fa = enc.encode(&a).unwrap().get(LayerTag::Relu4_1).clone();
        let fb = enc.encode(&b).unwrap().get(LayerTag::Relu4_1).clone();
        // cell (i+1, j+1) of `a` sees the same pixels as cell (i, j) of `b`; skip
        // cells whose 68-pixel receptive field touches either border
        let ia = fa.narrow(2, 5, 6).unwrap().narrow(3, 5, 6).unwrap();
        let ib = fb.narrow(2, 4, 6).unwrap().narrow(3, 4, 6).unwrap();
        let diff = scalar(&(ia - ib).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap()).unwrap();
        assert!(diff < 1e-4, "max diff {diff}");
    }

    #[test]
    fn two_point_channel_standardizes_to_unit_values() {
        let x = Tensor::new(&[1.0f64, 3.0], &Device::Cpu).unwrap().reshape((1, 1, 1, 2)).unwrap();
        let y: Vec<f64> = mean_var_normalize(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let s = (1.0f64 + STAT_EPS).sqrt();
        assert!((y[0] + 1.0 / s).abs() < 1e-12 && (y[1] - 1.0 / s).abs() < 1e-12);
        assert!((y[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn normalization_idempotent_constant_and_affine_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = normal_tensor(&[2, 3, 5, 5], 1.0, &mut rng, DType::F64, &Device::Cpu).unwrap();
        let n1 = mean_var_normalize(&x).unwrap();
        let n2 = mean_var_normalize(&n1).unwrap();
        let d = scalar(&(&n1 - &n2).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap()).unwrap();
        assert!(d < 1e-5);

        let c = Tensor::full(2.5f64, (1, 2, 3, 3), &Device::Cpu).unwrap();
        let nc = scalar(&mean_var_normalize(&c).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap()).unwrap();
        assert!(nc < 1e-6);

        let scaled = (x.affine(3.0, -7.0).unwrap()).clone();
        let n3 = mean_var_normalize(&scaled).unwrap();
        let d = scalar(&(&n1 - &n3).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap()).unwrap();
        assert!(d < 1e-4);
        let mean = scalar(&n1.flatten_from(2).unwrap().mean(D::Minus1).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap()).unwrap();
        assert!(mean < 1e-10);
    }
}
