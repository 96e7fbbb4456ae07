use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;

use crate::error::Result;
use crate::tensor_ops::{conv2d, normal_tensor};

/// A trainable convolution (stride 1, reflection padded when 3x3).
#[derive(Debug, Clone)]
pub struct Conv {
    pub name: String,
    pub weight: Var,
    pub bias: Var,
}

impl Conv {
    /// Kaiming fan-in initialization with zero bias.
    pub fn kaiming<R: Rng>(
        name: impl Into<String>,
        cout: usize,
        cin: usize,
        k: usize,
        rng: &mut R,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let w = normal_tensor(&[cout, cin, k, k], std, rng, dtype, device)?;
        Ok(Self {
            name: name.into(),
            weight: Var::from_tensor(&w)?,
            bias: Var::zeros(cout, dtype, device)?,
        })
    }

    pub fn from_tensors(name: impl Into<String>, weight: &Tensor, bias: &Tensor) -> Result<Self> {
        Ok(Self { name: name.into(), weight: Var::from_tensor(weight)?, bias: Var::from_tensor(bias)? })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(x, self.weight.as_tensor(), self.bias.as_tensor())
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.dims()[2]
    }

    pub fn named_vars(&self, prefix: &str) -> Vec<(String, Var)> {
        vec![
            (format!("{prefix}{}.weight", self.name), self.weight.clone()),
            (format!("{prefix}{}.bias", self.name), self.bias.clone()),
        ]
    }
}

/// Counts forward passes; clones share the count.
#[derive(Debug, Clone, Default)]
pub struct ForwardCounter(Arc<AtomicUsize>);

impl ForwardCounter {
    pub fn bump(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }

    pub fn get(&self) -> usize {
        self.0.load(Ordering::Relaxed)
    }
}
