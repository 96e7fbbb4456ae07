//! Randomized invariants checked against the reference implementations in `common`.

mod common;

use lcgnet_core::decoder::embed;
use lcgnet_core::encoder::mean_var_normalize;
use lcgnet_core::losses::{immerse_loss, tv_loss};
use lcgnet_core::psf::{local_stats, structure_similarity};
use lcgnet_core::saliency::spectral_residual_planes;
use lcgnet_core::{DType, Device, FusionParams, Image, Mask, PairMode, Tensor};
use proptest::prelude::*;
use rand::Rng;

use common::*;

fn config() -> ProptestConfig {
    ProptestConfig { cases: 32, ..ProptestConfig::default() }
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn local_stats_matches_loops(h in 1usize..7, w in 1usize..7, half in 0usize..4, seed in any::<u64>()) {
        let omega = 2 * half + 1;
        let x = uniform(&[1, 1, h, w], -2.0, 2.0, seed);
        let (mean, std) = local_stats(&x, omega).unwrap();
        let (om, os) = local_stats_oracle(&to_vec(&x), h, w, omega);
        for (a, b) in to_vec(&mean).iter().zip(&om).chain(to_vec(&std).iter().zip(&os)) {
            prop_assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn saliency_is_normalized(c in 1usize..4, h in 2usize..9, w in 2usize..9, seed in any::<u64>()) {
        let mut r = rng(seed);
        let planes: Vec<Vec<f64>> = (0..c).map(|_| (0..h * w).map(|_| r.random_range(0.0..3.0)).collect()).collect();
        let s = spectral_residual_planes(&planes, h, w, 3).unwrap();
        prop_assert!(s.is_normalized());
        let (lo, hi) = s.values().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        prop_assert!(lo >= 0.0 && hi <= 1.0);
        prop_assert!(lo == 0.0 && (hi == 1.0 || hi == 0.0));
    }

    #[test]
    fn normalized_channels_have_zero_mean_unit_variance(c in 1usize..4, n in 4usize..30, scale in 0.5f64..5.0, seed in any::<u64>()) {
        let x = (uniform(&[1, c, 1, n], -1.0, 1.0, seed) * scale).unwrap();
        let y = to_vec(&mean_var_normalize(&x).unwrap());
        let xv = to_vec(&x);
        for k in 0..c {
            let row = &y[k * n..(k + 1) * n];
            let src = &xv[k * n..(k + 1) * n];
            let m0 = src.iter().sum::<f64>() / n as f64;
            let var0 = src.iter().map(|v| (v - m0).powi(2)).sum::<f64>() / n as f64;
            let m = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64;
            prop_assert!(m.abs() < 1e-9);
            // exact value with the stabilizing epsilon
            prop_assert!((var - var0 / (var0 + 1e-5)).abs() < 1e-9);
        }
    }

    #[test]
    fn similarity_stays_in_unit_interval(c in 1usize..5, h in 1usize..5, w in 1usize..5, seed in any::<u64>()) {
        let ff = mean_var_normalize(&uniform(&[2, c, h, w], -1.0, 1.0, seed)).unwrap();
        let fb = mean_var_normalize(&uniform(&[2, c, h, w], -1.0, 1.0, seed ^ 1)).unwrap();
        let params = FusionParams::init(c, 0.1, &mut rng(seed), DType::F64, &Device::Cpu).unwrap();
        let a = to_vec(&structure_similarity(&ff, &fb, &params).unwrap());
        prop_assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn immerse_loss_matches_pair_loops(c in 1usize..4, h in 1usize..5, w in 1usize..5, seed in any::<u64>()) {
        let n = h * w;
        let fo = uniform(&[1, c, h, w], -1.0, 1.0, seed);
        let ff = uniform(&[1, c, h, w], -1.0, 1.0, seed ^ 2);
        let s = uniform(&[1, 1, h, w], 0.0, 1.0, seed ^ 3);
        let mut r = rng(seed);
        let m: Vec<f64> = (0..n).map(|_| if r.random_bool(0.4) { 1.0 } else { 0.0 }).collect();
        let mt = Tensor::from_vec(m.clone(), (1, 1, h, w), &Device::Cpu).unwrap();
        let got = to_vec(&immerse_loss(&fo, &ff, &s, &mt, PairMode::Exact, &mut r).unwrap())[0];
        let want = immerse_oracle(&to_vec(&fo), &to_vec(&ff), &to_vec(&s), &m, c, n);
        prop_assert!(got >= 0.0);
        prop_assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0), "{got} vs {want}");
    }

    #[test]
    fn constant_images_have_no_variation(v in 0.0f64..1.0, h in 1usize..6, w in 1usize..6) {
        let img = (Tensor::ones((2, 3, h, w), DType::F64, &Device::Cpu).unwrap() * v).unwrap();
        prop_assert_eq!(to_vec(&tv_loss(&img).unwrap())[0], 0.0);
    }

    #[test]
    fn embedding_keeps_unmasked_pixels(h in 1usize..8, w in 1usize..8, seed in any::<u64>()) {
        let mut r = rng(seed);
        let pixels = |r: &mut rand_chacha::ChaCha8Rng| (0..3 * h * w).map(|_| r.random::<f32>()).collect::<Vec<_>>();
        let io = Image::new(h, w, pixels(&mut r)).unwrap();
        let ib = Image::new(h, w, pixels(&mut r)).unwrap();
        let mask = Mask::new(h, w, (0..h * w).map(|_| r.random_range(0..2u8)).collect()).unwrap();
        let out = embed(&io, &ib, &mask).unwrap();
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let src = if mask.get(y, x) { &io } else { &ib };
                    prop_assert_eq!(out.get(c, y, x).to_bits(), src.get(c, y, x).to_bits());
                }
            }
        }
    }
}
