//! Named-tensor archives on disk (safetensors container with string metadata).

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Tensors keyed by name plus free-form string metadata.
#[derive(Debug, Default)]
pub struct Archive {
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: HashMap<String, String>,
}

impl Archive {
    pub fn insert(&mut self, name: impl Into<String>, t: &Tensor) {
        self.tensors.insert(name.into(), t.clone());
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(String::as_str)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let raw = self
            .tensors
            .iter()
            .map(|(name, t)| Ok((name.clone(), RawTensor::from_tensor(t)?)))
            .collect::<Result<Vec<_>>>()?;
        let views = raw
            .iter()
            .map(|(name, r)| {
                TensorView::new(r.dtype, r.shape.clone(), &r.bytes)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| Error::Integrity(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        safetensors::serialize(views, Some(self.metadata.clone())).map_err(|e| Error::Integrity(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8], device: &Device) -> Result<Self> {
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| Error::Integrity(e.to_string()))?;
        let metadata = header.metadata().clone().unwrap_or_default();
        let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Integrity(e.to_string()))?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            let t = match view.dtype() {
                Dtype::F32 => {
                    let v: Vec<f32> = view.data().chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
                    Tensor::from_vec(v, view.shape(), device)?
                }
                Dtype::F64 => {
                    let v: Vec<f64> = view.data().chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
                    Tensor::from_vec(v, view.shape(), device)?
                }
                other => {
                    return Err(Error::Schema { name, reason: format!("unsupported dtype {other:?}") });
                }
            };
            tensors.insert(name, t);
        }
        Ok(Self { tensors, metadata })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, device: &Device) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref())?;
        Self::from_bytes(&bytes, device)
    }

    /// SHA-256 over names, shapes and raw little-endian bytes, in name order.
    pub fn content_hash(&self) -> Result<String> {
        hash_tensors(self.tensors.iter().map(|(k, v)| (k.as_str(), v)))
    }
}

pub fn hash_tensors<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<String> {
    let mut h = Sha256::new();
    for (name, t) in tensors {
        let raw = RawTensor::from_tensor(t)?;
        h.update(name.as_bytes());
        h.update(format!("{:?}{:?}", raw.dtype, raw.shape).as_bytes());
        h.update(&raw.bytes);
    }
    Ok(hex::encode(h.finalize()))
}

struct RawTensor {
    dtype: Dtype,
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

impl RawTensor {
    fn from_tensor(t: &Tensor) -> Result<Self> {
        let shape = t.dims().to_vec();
        let flat = t.flatten_all()?;
        let (dtype, bytes) = match t.dtype() {
            DType::F64 => (Dtype::F64, flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect()),
            _ => (
                Dtype::F32,
                flat.to_dtype(DType::F32)?.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
            ),
        };
        Ok(Self { dtype, shape, bytes })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip_is_bitwise() {
        let dev = Device::Cpu;
        let mut a = Archive::default();
        a.insert("w", &Tensor::new(&[[1.5f32, -0.0], [f32::MIN_POSITIVE, 3.25]], &dev).unwrap());
        a.insert("d", &Tensor::new(&[0.1f64, 0.2], &dev).unwrap());
        a.metadata.insert("k".into(), "v".into());
        let bytes = a.to_bytes().unwrap();
        let b = Archive::from_bytes(&bytes, &dev).unwrap();
        assert_eq!(b.meta("k"), Some("v"));
        assert_eq!(a.content_hash().unwrap(), b.content_hash().unwrap());
        assert_eq!(b.get("d").unwrap().dtype(), DType::F64);
    }

    #[test]
    fn truncated_bytes_are_an_integrity_error() {
        let dev = Device::Cpu;
        let mut a = Archive::default();
        a.insert("w", &Tensor::zeros((4, 4), DType::F32, &dev).unwrap());
        let bytes = a.to_bytes().unwrap();
        let err = Archive::from_bytes(&bytes[..bytes.len() - 5], &dev).unwrap_err();
        assert!(matches!(err, Error::Integrity(_)));
    }
}
