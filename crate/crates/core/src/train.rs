//! Optimization of the decoder (and fusion convolutions) against a frozen encoder.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::{self, Checkpoint};
use crate::config::TrainConfig;
use crate::data::{Batch, Dataset, SampleGeometry, TrainSample};
use crate::decoder::downsample_mask;
use crate::encoder::{mean_var_normalize, EncoderParams, LayerTag};
use crate::error::{Error, Result};
use crate::losses::{bpa_loss, immerse_loss, remove_loss, total_loss, tv_loss, LossParts, LossReport};
use crate::model::Model;
use crate::saliency::batch_saliency;

/// Adam with first and second moments kept by parameter name.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub steps: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Default for Adam {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, steps: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }
}

impl Adam {
    /// One bias-corrected update; parameters without a gradient see a zero gradient.
    pub fn step(&mut self, vars: &[(String, Var)], grads: &GradStore, lr: f64) -> Result<()> {
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, var) in vars {
            let p = var.as_tensor();
            let g = match grads.get(p) {
                Some(g) => g.clone(),
                None => p.zeros_like()?,
            };
            let m = match self.m.get(name) {
                Some(m) => ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?,
                None => (&g * (1.0 - self.beta1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.beta2))?,
            };
            let update = ((&m / c1)? / ((&v / c2)?.sqrt()? + self.eps)?)?;
            var.set(&(p - (update * lr)?)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub iteration: u64,
    pub model: Model,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig, device: &Device) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = Model::init(cfg.model(), cfg.fusion_init_std, &mut rng, device)?;
        Ok(Self { iteration: 0, model, adam: Adam::default(), rng })
    }
}

/// Forward, losses, backward and one Adam update.
pub fn train_step(state: &mut TrainState, batch: &Batch, encoder: &EncoderParams, cfg: &TrainConfig) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(Error::Parameter("empty batch".into()));
    }
    if batch.len() != cfg.batch_size {
        return Err(Error::Parameter(format!("batch has {} samples, config expects {}", batch.len(), cfg.batch_size)));
    }
    let model = &state.model;
    let generation = model.generate(encoder, &batch.foreground, &batch.background, &batch.mask)?;
    let ff = generation.foreground.get(LayerTag::Relu4_1).detach();
    let background = generation.background.detach();
    let output_features = encoder.encode(&generation.output)?;
    let fo = output_features.get(LayerTag::Relu4_1);

    let saliency = batch_saliency(&ff, cfg.saliency_window)?;
    let md = downsample_mask(&batch.mask)?;
    let parts = LossParts {
        im: immerse_loss(
            &mean_var_normalize(fo)?,
            &mean_var_normalize(&ff)?,
            &saliency,
            &md,
            cfg.pair_mode(),
            &mut state.rng,
        )?,
        re: remove_loss(&output_features, &background, &saliency)?,
        bpa: bpa_loss(&output_features, &background, cfg.omega)?,
        tv: tv_loss(&generation.output)?,
    };
    let (total, report) = total_loss(&parts, &cfg.weights)?;
    let grads = total.backward()?;
    let vars = model.named_vars(!cfg.freeze_fusion);
    let lr = cfg.lr_at(state.iteration);
    state.adam.step(&vars, &grads, lr)?;
    state.iteration += 1;
    Ok(report)
}

/// Where training batches come from.
#[derive(Debug, Clone)]
pub enum SampleSource {
    /// Random pairs drawn from a corpus on disk.
    Dataset(Dataset),
    /// A fixed in-memory set, cycled in order.
    Fixed(Vec<TrainSample>),
}

impl SampleSource {
    pub fn batch(&self, state: &mut TrainState, cfg: &TrainConfig, device: &Device) -> Result<Batch> {
        let samples = match self {
            Self::Dataset(ds) => ds.sample_batch(cfg.batch_size, cfg.geometry(), &mut state.rng)?,
            Self::Fixed(all) => {
                if all.is_empty() {
                    return Err(Error::Dataset("fixed sample set is empty".into()));
                }
                let start = state.iteration as usize * cfg.batch_size;
                (0..cfg.batch_size).map(|i| all[(start + i) % all.len()].clone()).collect()
            }
        };
        Batch::from_samples(&samples, DType::F32, device)
    }
}

#[derive(Serialize)]
struct LogRow {
    iter: u64,
    lr: f64,
    #[serde(flatten)]
    report: LossReport,
}

/// Training run bound to one config, encoder and sample source.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub encoder: EncoderParams,
    pub source: SampleSource,
    pub state: TrainState,
    pub device: Device,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, encoder: EncoderParams, source: SampleSource, device: Device) -> Result<Self> {
        cfg.validate()?;
        let state = TrainState::new(&cfg, &device)?;
        state.model.check_encoder(&encoder)?;
        Ok(Self { cfg, encoder, source, state, device })
    }

    /// Builds a trainer from the config's encoder and dataset paths.
    pub fn from_config(cfg: TrainConfig, device: Device) -> Result<Self> {
        let encoder = EncoderParams::load(&cfg.encoder, cfg.model().arch()?, &device)?;
        let dataset = Dataset::discover(&cfg.dataset, cfg.cull_gray)?;
        Self::new(cfg, encoder, SampleSource::Dataset(dataset), device)
    }

    pub fn latest_path(&self) -> PathBuf {
        self.cfg.output_dir.join("latest.safetensors")
    }

    pub fn log_path(&self) -> PathBuf {
        self.cfg.output_dir.join("train_log.jsonl")
    }

    /// Restores state from `latest.safetensors`; returns the iteration resumed at.
    pub fn resume(&mut self) -> Result<u64> {
        let ck = Checkpoint::load(self.latest_path(), &self.device)?;
        if ck.model != self.cfg.model() {
            return Err(Error::Schema {
                name: "model".into(),
                reason: format!("checkpoint model {:?} differs from config {:?}", ck.model, self.cfg.model()),
            });
        }
        if ck.config_hash.as_deref() != Some(self.cfg.hash().as_str()) {
            log::warn!("resuming from a checkpoint written with a different training config");
        }
        ck.verify_encoder(&self.encoder)?;
        self.state = ck.into_state()?;
        Ok(self.state.iteration)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.state, Some(&self.cfg.hash()), Some(&self.encoder.weights_hash()?))
    }

    /// Trains until `max_iters`, invoking `on_step` after every step, and returns
    /// the final checkpoint path.
    ///
    /// Writes `checkpoint-<iter>.safetensors` every `checkpoint_every` steps and at
    /// the end, mirrors the newest to `latest.safetensors`, and appends one JSON
    /// line per step to `train_log.jsonl`.
    pub fn run(&mut self, mut on_step: impl FnMut(u64, &LossReport)) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.cfg.output_dir)?;
        let mut log = OpenOptions::new().create(true).append(true).open(self.log_path())?;
        let mut last = None;
        while self.state.iteration < self.cfg.max_iters {
            let lr = self.cfg.lr_at(self.state.iteration);
            let batch = self.source.batch(&mut self.state, &self.cfg, &self.device)?;
            let report = train_step(&mut self.state, &batch, &self.encoder, &self.cfg)?;
            let iter = self.state.iteration;
            writeln!(log, "{}", serde_json::to_string(&LogRow { iter, lr, report })?)?;
            on_step(iter, &report);
            if iter.is_multiple_of(self.cfg.checkpoint_every) || iter == self.cfg.max_iters {
                last = Some(self.checkpoint()?);
            }
        }
        match last {
            Some(p) => Ok(p),
            // already at max_iters: make sure a final checkpoint exists
            None => self.checkpoint(),
        }
    }

    fn checkpoint(&self) -> Result<PathBuf> {
        let path = self.cfg.output_dir.join(format!("checkpoint-{:08}.safetensors", self.state.iteration));
        self.save(&path)?;
        std::fs::copy(&path, self.latest_path())?;
        log::info!("iteration {}: wrote {}", self.state.iteration, path.display());
        Ok(path)
    }
}

/// Convenience wrapper: train from a config file, optionally resuming.
pub fn train_loop(cfg: TrainConfig, resume: bool, device: Device) -> Result<PathBuf> {
    let mut trainer = Trainer::from_config(cfg, device)?;
    if resume {
        let k = trainer.resume()?;
        log::info!("resumed at iteration {k}");
    }
    trainer.run(|_, _| {})
}

/// Synthetic toy set: blobs over smooth gradients, for smoke tests and demos.
pub fn synthetic_samples(count: usize, size: usize, seed: u64) -> Result<Vec<TrainSample>> {
    use crate::image::{Image, Mask};
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geometry = SampleGeometry { size, background_resize: size };
    (0..count)
        .map(|_| {
            let (cy, cx) = (rng.random_range(0.3..0.7) * size as f64, rng.random_range(0.3..0.7) * size as f64);
            let r = rng.random_range(0.2..0.35) * size as f64;
            let fg_color: [f32; 3] = rng.random();
            let bg_a: [f32; 3] = rng.random();
            let bg_b: [f32; 3] = rng.random();
            let freq = rng.random_range(1.0..4.0f32);
            let n = size * size;
            let mut fg = vec![0f32; 3 * n];
            let mut bg = vec![0f32; 3 * n];
            let mut mask = vec![0u8; n];
            for y in 0..size {
                for x in 0..size {
                    let i = y * size + x;
                    let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
                    mask[i] = u8::from(d < r);
                    let stripe = 0.5 + 0.5 * (freq * x as f32 / size as f32 * std::f32::consts::TAU).sin();
                    let ty = y as f32 / size as f32;
                    for c in 0..3 {
                        let shade = 1.0 - 0.5 * (d / r).min(1.0) as f32;
                        fg[c * n + i] = (fg_color[c] * shade).clamp(0.0, 1.0);
                        bg[c * n + i] = (bg_a[c] * (1.0 - ty) + bg_b[c] * ty) * (0.7 + 0.3 * stripe);
                    }
                }
            }
            TrainSample::from_parts(
                &Image::new(size, size, fg)?,
                &Mask::new(size, size, mask)?,
                &Image::new(size, size, bg)?,
                geometry,
                (0, 0),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::LossWeights;
    use crate::tensor_ops::scalar;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig { batch_size: 2, image_size: 16, background_resize: 16, base_width: 2, ..Default::default() }
    }

    fn tiny_trainer(cfg: TrainConfig) -> Trainer {
        let encoder = EncoderParams::random(cfg.model().arch().unwrap(), 3, &Device::Cpu).unwrap();
        let samples = synthetic_samples(4, 16, 5).unwrap();
        Trainer::new(cfg, encoder, SampleSource::Fixed(samples), Device::Cpu).unwrap()
    }

    fn snapshot(model: &Model) -> Vec<Vec<f32>> {
        model
            .named_vars(true)
            .iter()
            .map(|(_, v)| v.as_tensor().flatten_all().unwrap().to_vec1().unwrap())
            .collect()
    }

    #[test]
    fn zero_weights_leave_parameters_unchanged() {
        let cfg = TrainConfig { weights: LossWeights::ZERO, ..tiny_cfg() };
        let mut t = tiny_trainer(cfg.clone());
        let before = snapshot(&t.state.model);
        let batch = t.source.batch(&mut t.state, &cfg, &Device::Cpu).unwrap();
        let report = train_step(&mut t.state, &batch, &t.encoder, &cfg).unwrap();
        assert_eq!(report.total, 0.0);
        assert_eq!(snapshot(&t.state.model), before);
        assert_eq!(t.state.iteration, 1);
    }

    #[test]
    fn step_updates_decoder_but_not_frozen_fusion() {
        let cfg = TrainConfig { freeze_fusion: true, ..tiny_cfg() };
        let mut t = tiny_trainer(cfg.clone());
        let dec_before = scalar(&t.state.model.decoder.layers()[0].weight.as_tensor().sum_all().unwrap()).unwrap();
        let fusion_before: Vec<f32> = t.state.model.fusion.f.weight.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        let batch = t.source.batch(&mut t.state, &cfg, &Device::Cpu).unwrap();
        train_step(&mut t.state, &batch, &t.encoder, &cfg).unwrap();
        let dec_after = scalar(&t.state.model.decoder.layers()[0].weight.as_tensor().sum_all().unwrap()).unwrap();
        let fusion_after: Vec<f32> = t.state.model.fusion.f.weight.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        assert_ne!(dec_before, dec_after);
        assert_eq!(fusion_before, fusion_after);
    }

    #[test]
    fn wrong_batch_size_rejected() {
        let cfg = tiny_cfg();
        let mut t = tiny_trainer(cfg.clone());
        let batch = t.source.batch(&mut t.state, &TrainConfig { batch_size: 1, ..cfg.clone() }, &Device::Cpu).unwrap();
        assert!(matches!(train_step(&mut t.state, &batch, &t.encoder, &cfg), Err(Error::Parameter(_))));
    }

    #[test]
    fn runs_are_deterministic() {
        let cfg = TrainConfig { max_iters: 3, pair_sample_k: Some(10), ..tiny_cfg() };
        let run = || {
            let dir = tempfile::tempdir().unwrap();
            let mut t = tiny_trainer(TrainConfig { output_dir: dir.path().into(), ..cfg.clone() });
            let mut reports = Vec::new();
            t.run(|_, r| reports.push(*r)).unwrap();
            reports
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn synthetic_samples_are_valid() {
        let s = synthetic_samples(3, 32, 1).unwrap();
        assert_eq!(s.len(), 3);
        assert!(s.iter().all(|x| x.mask.count_ones() > 0 && x.size() == 32));
    }
}
