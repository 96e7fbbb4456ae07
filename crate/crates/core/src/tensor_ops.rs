//! Small differentiable building blocks on `(B, C, H, W)` tensors.

use candle_core::{DType, Device, Tensor, D};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;

/// Reflection padding of one pixel on both spatial axes. Axes of length 1
/// are replicated instead.
pub fn reflect_pad1(x: &Tensor) -> Result<Tensor> {
    let mut x = x.clone();
    for dim in [2, 3] {
        let n = x.dim(dim)?;
        x = if n < 2 {
            x.pad_with_same(dim, 1, 1)?
        } else {
            Tensor::cat(&[x.narrow(dim, 1, 1)?, x.clone(), x.narrow(dim, n - 2, 1)?], dim)?
        };
    }
    Ok(x)
}

/// Convolution with stride 1; `3x3` kernels are reflection padded so the
/// spatial size is preserved.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let k = weight.dim(2)?;
    let input = if k == 3 { reflect_pad1(x)? } else { x.clone() };
    let y = input.conv2d(weight, 0, 1, 1, 1)?;
    Ok(y.broadcast_add(&bias.reshape((1, bias.dim(0)?, 1, 1))?)?)
}

/// `sqrt` with a zero subgradient at the origin, so exact zeros neither
/// produce NaN gradients nor bias the value.
pub fn safe_sqrt(x: &Tensor) -> Result<Tensor> {
    let positive = x.gt(0.0)?;
    let guarded = positive.where_cond(x, &x.ones_like()?)?;
    Ok(positive.where_cond(&guarded.sqrt()?, &x.zeros_like()?)?)
}

/// Per-sample, per-channel spatial mean and population variance, both `(B, C, 1, 1)`.
pub fn channel_moments(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let (b, c, _, _) = x.dims4()?;
    let flat = x.flatten_from(2)?;
    let mean = flat.mean_keepdim(D::Minus1)?;
    let var = flat.broadcast_sub(&mean)?.sqr()?.mean_keepdim(D::Minus1)?;
    Ok((mean.reshape((b, c, 1, 1))?, var.reshape((b, c, 1, 1))?))
}

/// Tensor of i.i.d. `N(0, std^2)` samples drawn from `rng`.
pub fn normal_tensor<R: Rng>(
    shape: &[usize],
    std: f64,
    rng: &mut R,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("standard deviation must be finite and non-negative");
    let values: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    Ok(Tensor::from_vec(values, shape, device)?.to_dtype(dtype)?)
}

/// Scalar value of a rank-0 (or single element) tensor as `f64`.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0])
}
