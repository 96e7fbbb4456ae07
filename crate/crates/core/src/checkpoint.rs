//! Checkpoint archives: model parameters, optimizer moments, counters and RNG position.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::archive::Archive;
use crate::decoder::DecoderParams;
use crate::encoder::{EncoderParams, LayerTag};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::Conv;
use crate::psf::FusionParams;
use crate::train::{Adam, TrainState};

pub const FORMAT: &str = "lcgnet-checkpoint";
pub const VERSION: u32 = 1;

const PAYLOAD_HASH: &str = "payload_sha256";

/// A decoded checkpoint, before it is turned into a model or a training state.
#[derive(Debug)]
pub struct Checkpoint {
    pub iteration: u64,
    pub model: ModelConfig,
    pub config_hash: Option<String>,
    pub encoder_hash: Option<String>,
    archive: Archive,
}

pub fn save(path: impl AsRef<Path>, state: &TrainState, config_hash: Option<&str>, encoder_hash: Option<&str>) -> Result<()> {
    to_archive(state, config_hash, encoder_hash)?.save(path)
}

pub fn to_archive(state: &TrainState, config_hash: Option<&str>, encoder_hash: Option<&str>) -> Result<Archive> {
    let mut ar = Archive::default();
    for (name, var) in state.model.named_vars(true) {
        ar.insert(name, var.as_tensor());
    }
    for (name, m) in &state.adam.m {
        ar.insert(format!("adam.m.{name}"), m);
    }
    for (name, v) in &state.adam.v {
        ar.insert(format!("adam.v.{name}"), v);
    }
    let payload = ar.content_hash()?;
    let rng = &state.rng;
    let meta = [
        ("format", FORMAT.to_string()),
        ("version", VERSION.to_string()),
        ("iteration", state.iteration.to_string()),
        ("adam_steps", state.adam.steps.to_string()),
        ("rng_seed", hex::encode(rng.get_seed())),
        ("rng_stream", rng.get_stream().to_string()),
        ("rng_word_pos", rng.get_word_pos().to_string()),
        ("model", serde_json::to_string(&state.model.config)?),
        (PAYLOAD_HASH, payload),
    ];
    ar.metadata.extend(meta.into_iter().map(|(k, v)| (k.to_string(), v)));
    if let Some(h) = config_hash {
        ar.metadata.insert("config_hash".into(), h.into());
    }
    if let Some(h) = encoder_hash {
        ar.metadata.insert("encoder_hash".into(), h.into());
    }
    Ok(ar)
}

fn required<'a>(ar: &'a Archive, key: &str) -> Result<&'a str> {
    ar.meta(key).ok_or_else(|| Error::Integrity(format!("checkpoint metadata lacks `{key}`")))
}

fn parse<T: std::str::FromStr>(ar: &Archive, key: &str) -> Result<T> {
    required(ar, key)?.parse().map_err(|_| Error::Integrity(format!("checkpoint metadata `{key}` is malformed")))
}

impl Checkpoint {
    pub fn load(path: impl AsRef<Path>, device: &Device) -> Result<Self> {
        Self::from_archive(Archive::load(path, device)?)
    }

    pub fn from_archive(archive: Archive) -> Result<Self> {
        match archive.meta("format") {
            Some(FORMAT) => {}
            other => return Err(Error::Version(format!("not a checkpoint (format tag {other:?})"))),
        }
        let version: u32 = parse(&archive, "version")?;
        if version != VERSION {
            return Err(Error::Version(format!("checkpoint version {version}, this build reads version {VERSION}")));
        }
        if archive.content_hash()? != required(&archive, PAYLOAD_HASH)? {
            return Err(Error::Integrity("checkpoint tensors do not match their recorded hash".into()));
        }
        let model = serde_json::from_str(required(&archive, "model")?)?;
        Ok(Self {
            iteration: parse(&archive, "iteration")?,
            model,
            config_hash: archive.meta("config_hash").map(str::to_owned),
            encoder_hash: archive.meta("encoder_hash").map(str::to_owned),
            archive,
        })
    }

    /// Fails with a version error when the checkpoint was trained against different encoder weights.
    pub fn verify_encoder(&self, encoder: &EncoderParams) -> Result<()> {
        if let Some(expected) = &self.encoder_hash {
            let found = encoder.weights_hash()?;
            if &found != expected {
                return Err(Error::Version(format!(
                    "checkpoint was trained with encoder {}, got encoder {}",
                    &expected[..12.min(expected.len())],
                    &found[..12.min(found.len())]
                )));
            }
        }
        Ok(())
    }

    pub fn to_model(&self) -> Result<Model> {
        let arch = self.model.arch()?;
        let get = |k: &str| self.archive.get(k).cloned();
        let decoder = DecoderParams::from_tensors(arch, get)?;
        let c = arch.channels(LayerTag::Relu4_1);
        let conv = |name: &str| -> Result<Conv> {
            let w = self.tensor(&format!("fusion.{name}.weight"), &[c, c, 1, 1])?;
            let b = self.tensor(&format!("fusion.{name}.bias"), &[c])?;
            Conv::from_tensors(name, &w, &b)
        };
        let fusion = FusionParams { f: conv("f")?, g: conv("g")?, e: conv("e")?, h: conv("h")? };
        Ok(Model { config: self.model, decoder, fusion })
    }

    fn tensor(&self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let t = self
            .archive
            .get(name)
            .ok_or_else(|| Error::Schema { name: name.into(), reason: "missing tensor".into() })?;
        if t.dims() != shape {
            return Err(Error::Schema { name: name.into(), reason: format!("expected {shape:?}, found {:?}", t.dims()) });
        }
        Ok(t.clone())
    }

    pub fn into_state(self) -> Result<TrainState> {
        let model = self.to_model()?;
        let moments = |prefix: &str| -> BTreeMap<String, Tensor> {
            self.archive
                .tensors
                .iter()
                .filter_map(|(k, t)| k.strip_prefix(prefix).map(|n| (n.to_string(), t.clone())))
                .collect()
        };
        let adam = Adam {
            steps: parse(&self.archive, "adam_steps")?,
            m: moments("adam.m."),
            v: moments("adam.v."),
            ..Adam::default()
        };
        let seed: [u8; 32] = hex::decode(required(&self.archive, "rng_seed")?)
            .ok()
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| Error::Integrity("checkpoint rng seed is malformed".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(parse(&self.archive, "rng_stream")?);
        rng.set_word_pos(parse(&self.archive, "rng_word_pos")?);
        Ok(TrainState { iteration: self.iteration, model, adam, rng })
    }
}
