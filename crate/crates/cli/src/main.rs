use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lcgnet_core::checkpoint;
use lcgnet_core::pipeline::{self, bench_csv, dataset_generate, dump_saliency, dump_similarity, load_objects, panel};
use lcgnet_core::train::{train_loop, TrainState};
use lcgnet_core::{
    Arch, Device, EncoderParams, Error, ErrorKind, FusionMode, Generator, Image, Mask, Preprocess, RegionRect,
    TrainConfig,
};

/// Location-free camouflage generation.
#[derive(Parser)]
#[command(name = "lcgnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ModelArgs {
    /// Trained checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Encoder weights the checkpoint was trained with.
    #[arg(long, default_value = "weights/vgg19_relu4_1.safetensors")]
    vgg: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train the decoder and fusion layers.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from `latest.safetensors` in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Hide one object in a background at a chosen location.
    Camouflage {
        #[arg(long)]
        fg: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        bg: PathBuf,
        #[arg(long)]
        top: usize,
        #[arg(long)]
        left: usize,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: PathBuf,
        /// Write the foreground saliency map here.
        #[arg(long)]
        dump_saliency: Option<PathBuf>,
        /// Write the structure similarity gate here.
        #[arg(long)]
        dump_similarity: Option<PathBuf>,
        /// Write a foreground | mask | region | result strip here.
        #[arg(long)]
        panel: Option<PathBuf>,
    },
    /// Hide several objects in turn; one JSON object per line: {"fg", "mask", "top", "left"}.
    Multi {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        bg: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate camouflaged images without a mask, with a JSONL manifest.
    Datagen {
        #[arg(long)]
        fg_dir: PathBuf,
        #[arg(long)]
        bg_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Side both inputs are resized to.
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Time full camouflage passes on synthetic inputs.
    Bench {
        #[command(flatten)]
        model: ModelArgs,
        /// Comma-separated `HxW` sizes.
        #[arg(long, default_value = "256x256,512x512")]
        sizes: String,
        #[arg(long, default_value_t = 5)]
        runs: usize,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Write randomly initialized encoder weights (for tests and demos).
    RandomEncoder {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        base_width: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "imagenet")]
        preprocess: Preprocess,
    },
    /// Write an untrained checkpoint bound to an encoder.
    InitCheckpoint {
        #[arg(long)]
        vgg: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        base_width: usize,
        #[arg(long, default_value = "psf")]
        fusion: FusionMode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_sizes(s: &str) -> Result<Vec<(usize, usize)>, Error> {
    s.split(',')
        .map(|part| {
            let (h, w) = part.trim().split_once('x').ok_or_else(|| Error::Parameter(format!("bad size `{part}`")))?;
            let parse = |v: &str| v.parse::<usize>().map_err(|_| Error::Parameter(format!("bad size `{part}`")));
            Ok((parse(h)?, parse(w)?))
        })
        .collect()
}

fn load_generator(model: &ModelArgs) -> Result<Generator, Error> {
    Generator::load(&model.ckpt, &model.vgg, Device::Cpu)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train { config, resume } => {
            let cfg = TrainConfig::load(&config)?;
            let path = train_loop(cfg, resume, Device::Cpu)?;
            println!("{}", path.display());
        }
        Command::Camouflage { fg, mask, bg, top, left, model, out, dump_saliency: sal, dump_similarity: sim, panel: strip } => {
            let generator = load_generator(&model)?;
            let fg = Image::load(&fg)?;
            let mask = Mask::load(&mask)?;
            let bg = Image::load(&bg)?;
            let (result, patch) = generator.camouflage(&fg, &mask, &bg, top, left)?;
            result.save_png(&out)?;
            let size = (fg.height(), fg.width());
            if let Some(p) = sal {
                dump_saliency(&patch, generator.model.config.saliency_window, size, p)?;
            }
            if let Some(p) = sim {
                dump_similarity(&patch, size, p)?;
            }
            if let Some(p) = strip {
                let rect = RegionRect::new(top, left, fg.height(), fg.width());
                let region = bg.crop(rect)?;
                let done = result.crop(rect)?;
                panel(&[&fg, &Image::from_mask(&mask), &region, &done], 4)?.save_png(p)?;
            }
        }
        Command::Multi { spec, bg, model, out } => {
            let generator = load_generator(&model)?;
            let objects = load_objects(&spec)?;
            generator.camouflage_multi(&objects, &Image::load(&bg)?)?.save_png(&out)?;
        }
        Command::Datagen { fg_dir, bg_dir, out_dir, count, seed, size, model } => {
            let generator = load_generator(&model)?;
            let rows = dataset_generate(&generator, &fg_dir, &bg_dir, &out_dir, count, seed, size)?;
            println!("wrote {} images and {}", rows.len(), out_dir.join("manifest.jsonl").display());
        }
        Command::Bench { model, sizes, runs, csv } => {
            let generator = load_generator(&model)?;
            let rows = pipeline::benchmark(&generator, &parse_sizes(&sizes)?, runs)?;
            let table = bench_csv(&rows);
            print!("{table}");
            println!("# reference: 1.12 s average per image on a GTX 1080 Ti class GPU");
            if let Some(p) = csv {
                std::fs::write(p, table)?;
            }
        }
        Command::RandomEncoder { out, base_width, seed, preprocess } => {
            EncoderParams::random(Arch::new(base_width)?, seed, &Device::Cpu)?.with_preprocess(preprocess).save(&out)?;
        }
        Command::InitCheckpoint { vgg, out, base_width, fusion, seed } => init_checkpoint(&vgg, &out, base_width, fusion, seed)?,
    }
    Ok(())
}

fn init_checkpoint(vgg: &Path, out: &Path, base_width: usize, fusion: FusionMode, seed: u64) -> Result<(), Error> {
    let cfg = TrainConfig { base_width, fusion, seed, ..Default::default() };
    let encoder = EncoderParams::load(vgg, cfg.model().arch()?, &Device::Cpu)?;
    let state = TrainState::new(&cfg, &Device::Cpu)?;
    checkpoint::save(out, &state, None, Some(&encoder.weights_hash()?))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Input => 2,
                ErrorKind::Version => 3,
                ErrorKind::Runtime => 1,
            })
        }
    }
}
