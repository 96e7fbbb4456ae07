//! Independent reference implementations and a finite-difference gradient checker.
#![allow(dead_code)]

use std::f64::consts::PI;

use lcgnet_core::{DType, Device, Result, Tensor};
use candle_core::Var;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut r = rng(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| r.random_range(lo..hi)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

pub fn to_vec(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

pub fn var(t: &Tensor) -> Var {
    Var::from_tensor(&t.to_dtype(DType::F64).unwrap()).unwrap()
}

/// Norm-wise relative error `|a - b| / max(|a|, |b|)` (0 when both vanish).
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Max over `vars` of the relative error between the autograd gradient of the
/// scalar `f()` and a central finite difference with step `h`.
pub fn gradcheck(vars: &[Var], f: impl Fn() -> Result<Tensor>, h: f64) -> f64 {
    let loss = f().unwrap();
    let grads = loss.backward().unwrap();
    let mut worst: f64 = 0.0;
    for v in vars {
        let analytic = match grads.get(v.as_tensor()) {
            Some(g) => to_vec(g),
            None => vec![0.0; v.elem_count()],
        };
        let shape = v.shape().clone();
        let base = to_vec(v.as_tensor());
        let mut numeric = Vec::with_capacity(base.len());
        for i in 0..base.len() {
            let mut probe = base.clone();
            probe[i] = base[i] + h;
            v.set(&Tensor::from_vec(probe.clone(), shape.clone(), &Device::Cpu).unwrap()).unwrap();
            let up = to_vec(&f().unwrap())[0];
            probe[i] = base[i] - h;
            v.set(&Tensor::from_vec(probe, shape.clone(), &Device::Cpu).unwrap()).unwrap();
            let down = to_vec(&f().unwrap())[0];
            numeric.push((up - down) / (2.0 * h));
        }
        v.set(&Tensor::from_vec(base, shape, &Device::Cpu).unwrap()).unwrap();
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Window mean and `sqrt(var + 1e-5)` by explicit loops with replicated borders.
pub fn local_stats_oracle(plane: &[f64], h: usize, w: usize, omega: usize) -> (Vec<f64>, Vec<f64>) {
    let r = (omega / 2) as isize;
    let mut mean = vec![0.0; h * w];
    let mut std = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut vals = Vec::with_capacity(omega * omega);
            for dy in -r..=r {
                for dx in -r..=r {
                    let yy = clamp_index(y as isize + dy, h);
                    let xx = clamp_index(x as isize + dx, w);
                    vals.push(plane[yy * w + xx]);
                }
            }
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64;
            mean[y * w + x] = m;
            std[y * w + x] = (var + 1e-5).sqrt();
        }
    }
    (mean, std)
}

#[derive(Clone, Copy, Debug)]
struct C64 {
    re: f64,
    im: f64,
}

fn dft2(data: &[C64], h: usize, w: usize, inverse: bool) -> Vec<C64> {
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut out = vec![C64 { re: 0.0, im: 0.0 }; h * w];
    for u in 0..h {
        for v in 0..w {
            let mut acc = C64 { re: 0.0, im: 0.0 };
            for y in 0..h {
                for x in 0..w {
                    let theta = sign * 2.0 * PI * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                    let (s, c) = theta.sin_cos();
                    let z = data[y * w + x];
                    acc.re += z.re * c - z.im * s;
                    acc.im += z.re * s + z.im * c;
                }
            }
            if inverse {
                acc.re /= (h * w) as f64;
                acc.im /= (h * w) as f64;
            }
            out[u * w + v] = acc;
        }
    }
    out
}

/// Spectral residual saliency by direct double-sum DFTs, min-max normalized.
pub fn spectral_residual_oracle(planes: &[Vec<f64>], h: usize, w: usize, n: usize) -> Vec<f64> {
    let r = (n / 2) as isize;
    let mut total = vec![0.0; h * w];
    for plane in planes {
        let first = plane[0];
        if plane.iter().all(|&v| v == first) {
            continue;
        }
        let spec = dft2(&plane.iter().map(|&re| C64 { re, im: 0.0 }).collect::<Vec<_>>(), h, w, false);
        let log_amp: Vec<f64> = spec.iter().map(|z| (z.re.hypot(z.im) + 1e-8).ln()).collect();
        let mut residual = vec![C64 { re: 0.0, im: 0.0 }; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        acc += log_amp[clamp_index(y as isize + dy, h) * w + clamp_index(x as isize + dx, w)];
                    }
                }
                let res = log_amp[y * w + x] - acc / (n * n) as f64;
                let phase = spec[y * w + x].im.atan2(spec[y * w + x].re);
                let mag = res.exp();
                residual[y * w + x] = C64 { re: mag * phase.cos(), im: mag * phase.sin() };
            }
        }
        let back = dft2(&residual, h, w, true);
        for (t, z) in total.iter_mut().zip(&back) {
            *t += z.re * z.re + z.im * z.im;
        }
    }
    let lo = total.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = total.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        total.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; h * w]
    }
}

/// All-pairs contrast loss for one sample. `fo`, `ff`: `C x N` channel-major; `s`, `m`: `N`.
pub fn immerse_oracle(fo: &[f64], ff: &[f64], s: &[f64], m: &[f64], c: usize, n: usize) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        for j in 0..n {
            if i == j || !(m[i] > 0.5 || m[j] > 0.5) {
                continue;
            }
            let mut d2 = 0.0;
            for k in 0..c {
                let di = fo[k * n + i] - ff[k * n + i];
                let dj = fo[k * n + j] - ff[k * n + j];
                d2 += (di - dj).powi(2);
            }
            sum += d2.sqrt() * (s[i] + s[j]);
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}
