//! Location-free camouflage generation: a frozen VGG-style encoder, a
//! position-aligned structure fusion module and a trained decoder that
//! hides a foreground object inside an arbitrary background region.

pub mod archive;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod image;
pub mod losses;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod psf;
pub mod resample;
pub mod saliency;
pub mod tensor_ops;
pub mod train;

pub use candle_core::{DType, Device, Tensor};

pub use crate::config::TrainConfig;
pub use crate::decoder::DecoderParams;
pub use crate::encoder::{Arch, EncoderParams, FeaturePyramid, LayerTag, Preprocess};
pub use crate::error::{Error, ErrorKind, Result};
pub use crate::image::{Image, Mask, RegionRect};
pub use crate::losses::{LossReport, LossWeights, PairMode};
pub use crate::model::{Model, ModelConfig};
pub use crate::pipeline::Generator;
pub use crate::psf::{FusionMode, FusionParams};
pub use crate::saliency::SaliencyMap;
