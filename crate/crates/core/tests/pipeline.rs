//! End-to-end inference behavior with small random networks.

use std::time::Instant;

use lcgnet_core::pipeline::{benchmark, dataset_generate, synthetic_request, Object};
use lcgnet_core::train::TrainState;
use lcgnet_core::{checkpoint, Arch, DType, Device, EncoderParams, Generator, Image, Mask, Model, ModelConfig, RegionRect, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn generator(base_width: usize) -> Generator {
    let encoder = EncoderParams::random(Arch::new(base_width).unwrap(), 8, &Device::Cpu).unwrap();
    let model = Model::init(ModelConfig { base_width, ..Default::default() }, 1e-2, &mut ChaCha8Rng::seed_from_u64(9), &Device::Cpu).unwrap();
    Generator::new(encoder, model, Device::Cpu).unwrap()
}

#[test]
fn aligned_inputs_skip_padding_transparently() {
    let g = generator(4);
    let (fg, mask, bg) = synthetic_request(24, 16, 1).unwrap();
    let dev = Device::Cpu;
    let direct = g
        .model
        .generate(&g.encoder, &fg.to_tensor(DType::F32, &dev).unwrap(), &bg.to_tensor(DType::F32, &dev).unwrap(), &mask.to_tensor(DType::F32, &dev).unwrap())
        .unwrap();
    let direct = Image::from_tensor(&direct.output).unwrap();
    assert_eq!(g.generate(&fg, &bg, &mask).unwrap().output.data(), direct.data());
}

#[test]
fn unaligned_inputs_are_the_crop_of_the_padded_run() {
    let g = generator(4);
    let (fg, mask, bg) = synthetic_request(21, 13, 2).unwrap();
    let padded = g
        .generate(&fg.pad_reflect_to_multiple(8), &bg.pad_reflect_to_multiple(8), &mask.pad_reflect_to_multiple(8))
        .unwrap()
        .output;
    let out = g.generate(&fg, &bg, &mask).unwrap().output;
    assert_eq!((out.height(), out.width()), (21, 13));
    assert_eq!(out.data(), padded.crop(RegionRect::new(0, 0, 21, 13)).unwrap().data());
}

#[test]
fn empty_mask_returns_the_background_exactly() {
    let g = generator(4);
    let (fg, mask, _) = synthetic_request(16, 16, 3).unwrap();
    let (_, _, bg) = synthetic_request(30, 40, 4).unwrap();
    let empty = Mask::filled(mask.height(), mask.width(), false).unwrap();
    let (out, _) = g.camouflage(&fg, &empty, &bg, 7, 11).unwrap();
    assert_eq!(out.data(), bg.data());
}

#[test]
fn reloaded_generators_are_deterministic_and_single_requests_match_multi() {
    let dir = tempfile::tempdir().unwrap();
    let (vgg, ckpt) = (dir.path().join("vgg.safetensors"), dir.path().join("ckpt.safetensors"));
    let encoder = EncoderParams::random(Arch::new(4).unwrap(), 5, &Device::Cpu).unwrap();
    encoder.save(&vgg).unwrap();
    let state = TrainState::new(&TrainConfig { base_width: 4, ..Default::default() }, &Device::Cpu).unwrap();
    checkpoint::save(&ckpt, &state, None, Some(&encoder.weights_hash().unwrap())).unwrap();

    let (fg, mask, _) = synthetic_request(12, 10, 6).unwrap();
    let (_, _, bg) = synthetic_request(32, 32, 7).unwrap();
    let a = Generator::load(&ckpt, &vgg, Device::Cpu).unwrap().camouflage(&fg, &mask, &bg, 3, 4).unwrap().0;
    let g = Generator::load(&ckpt, &vgg, Device::Cpu).unwrap();
    let b = g.camouflage(&fg, &mask, &bg, 3, 4).unwrap().0;
    assert_eq!(a.data(), b.data());
    let multi = g.camouflage_multi(&[Object { foreground: fg, mask, top: 3, left: 4 }], &bg).unwrap();
    assert_eq!(multi.data(), a.data());
}

#[test]
fn datagen_matches_a_full_mask_generation() {
    let g = generator(4);
    let dir = tempfile::tempdir().unwrap();
    let (fg_dir, bg_dir, out_dir) = (dir.path().join("fg"), dir.path().join("bg"), dir.path().join("out"));
    std::fs::create_dir_all(&fg_dir).unwrap();
    std::fs::create_dir_all(&bg_dir).unwrap();
    let (fg, _, bg) = synthetic_request(20, 28, 8).unwrap();
    fg.save_png(fg_dir.join("owl.png")).unwrap();
    bg.save_png(bg_dir.join("wood.png")).unwrap();
    let rows = dataset_generate(&g, &fg_dir, &bg_dir, &out_dir, 2, 1, 16).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.label == "owl"));

    let fg = Image::load(fg_dir.join("owl.png")).unwrap().resize_bilinear(16, 16).unwrap();
    let bg = Image::load(bg_dir.join("wood.png")).unwrap().resize_bilinear(16, 16).unwrap();
    let full = Mask::filled(16, 16, true).unwrap();
    let expected = g.generate(&fg, &bg, &full).unwrap().output;
    // same quantization as the written file
    expected.save_png(dir.path().join("expected.png")).unwrap();
    assert_eq!(Image::load(&rows[0].out).unwrap().data(), Image::load(dir.path().join("expected.png")).unwrap().data());
}

#[test]
fn doubling_the_side_costs_less_than_five_times() {
    let g = generator(16);
    let _warm = benchmark(&g, &[(64, 64)], 1).unwrap();
    let start = Instant::now();
    let rows = benchmark(&g, &[(256, 256), (512, 512)], 3).unwrap();
    assert!(rows.iter().all(|r| r.encoder_forwards == 1.0 && r.decoder_forwards == 1.0));
    let ratio = rows[1].median_seconds / rows[0].median_seconds;
    assert!(ratio < 5.0, "512/256 time ratio {ratio:.2} in {:.1?}", start.elapsed());
}
