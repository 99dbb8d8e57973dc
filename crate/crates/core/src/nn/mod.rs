//! Small parameter-management layer on top of candle.
//!
//! Parameters live in a [`ParamRegistry`]: an ordered name -> Var map with
//! name-keyed deterministic initialization, SHA-256 checksums for freezing
//! contracts, and safetensors round-trips for checkpoints. Trainable
//! parameters and non-trainable buffers (batch-norm running stats) are kept
//! in separate namespaces.

pub mod layers;
pub mod lstm;
pub mod ops;

use std::collections::BTreeMap;

use candle_core::{DType, Device, Shape, Tensor, Var};
use sha2::{Digest, Sha256};

use crate::rng::{derive_seed, Stream};
use crate::{Error, Result};

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// Normal with the given standard deviation.
    Normal(f64),
    Uniform(f64, f64),
    /// Kaiming-style normal scaled by sqrt(2 / fan_in).
    KaimingNormal { fan_in: usize },
    /// Uniform over +-1/sqrt(fan_in), the usual linear-layer default.
    FanInUniform { fan_in: usize },
}

/// Ordered registry of named parameters and buffers.
pub struct ParamRegistry {
    seed: u64,
    device: Device,
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
}

impl ParamRegistry {
    pub fn new(seed: u64, device: &Device) -> Self {
        ParamRegistry {
            seed,
            device: device.clone(),
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn init_tensor<S: Into<Shape>>(&self, name: &str, shape: S, init: Init) -> Result<Tensor> {
        let shape: Shape = shape.into();
        let n = shape.elem_count();
        let data: Vec<f32> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(c) => vec![c as f32; n],
            Init::Normal(std) => {
                let mut s = Stream::new(derive_seed(self.seed, name), "init");
                s.normal_vec(n).iter().map(|x| x * std as f32).collect()
            }
            Init::Uniform(lo, hi) => {
                let mut s = Stream::new(derive_seed(self.seed, name), "init");
                s.uniform_vec(n, lo as f32, hi as f32)
            }
            Init::KaimingNormal { fan_in } => {
                let std = (2.0 / fan_in as f64).sqrt() as f32;
                let mut s = Stream::new(derive_seed(self.seed, name), "init");
                s.normal_vec(n).iter().map(|x| x * std).collect()
            }
            Init::FanInUniform { fan_in } => {
                let bound = (1.0 / fan_in as f64).sqrt() as f32;
                let mut s = Stream::new(derive_seed(self.seed, name), "init");
                s.uniform_vec(n, -bound, bound)
            }
        };
        Ok(Tensor::from_vec(data, shape, &self.device)?)
    }

    /// Create (or fetch) a trainable parameter.
    pub fn param<S: Into<Shape>>(&mut self, name: &str, shape: S, init: Init) -> Result<Var> {
        if let Some(v) = self.params.get(name) {
            return Ok(v.clone());
        }
        let t = self.init_tensor(name, shape, init)?;
        let v = Var::from_tensor(&t)?;
        self.params.insert(name.to_string(), v.clone());
        Ok(v)
    }

    /// Create (or fetch) a non-trainable buffer.
    pub fn buffer<S: Into<Shape>>(&mut self, name: &str, shape: S, init: Init) -> Result<Var> {
        if let Some(v) = self.buffers.get(name) {
            return Ok(v.clone());
        }
        let t = self.init_tensor(name, shape, init)?;
        let v = Var::from_tensor(&t)?;
        self.buffers.insert(name.to_string(), v.clone());
        Ok(v)
    }

    pub fn trainable_vars(&self) -> Vec<(String, Var)> {
        self.params.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|v| v.as_tensor().elem_count()).sum()
    }

    /// SHA-256 over the little-endian f32 bytes of every trainable parameter,
    /// in name order. Buffers are excluded so running statistics do not
    /// perturb freezing checks on modules that contain none.
    pub fn checksum(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, var) in &self.params {
            hasher.update(name.as_bytes());
            let flat = var.as_tensor().flatten_all()?.to_dtype(DType::F32)?;
            for x in flat.to_vec1::<f32>()? {
                hasher.update(x.to_le_bytes());
            }
        }
        Ok(hex::encode(hasher.finalize()))
    }

    /// All tensors (params + buffers) keyed for serialization.
    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (k, v) in &self.params {
            out.insert(format!("param.{k}"), v.as_tensor().clone());
        }
        for (k, v) in &self.buffers {
            out.insert(format!("buffer.{k}"), v.as_tensor().clone());
        }
        out
    }

    /// Load values produced by [`Self::tensors`] into the existing vars.
    /// Every registered parameter must be present with a matching shape.
    pub fn load_tensors(&mut self, map: &std::collections::HashMap<String, Tensor>) -> Result<()> {
        for (k, v) in &self.params {
            let key = format!("param.{k}");
            let t = map
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{key}`")))?;
            if t.dims() != v.as_tensor().dims() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for `{key}`: checkpoint {:?} vs model {:?}",
                    t.dims(),
                    v.as_tensor().dims()
                )));
            }
            v.set(t)?;
        }
        for (k, v) in &self.buffers {
            let key = format!("buffer.{k}");
            let t = map
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{key}`")))?;
            v.set(t)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let tensors: std::collections::HashMap<String, Tensor> =
            self.tensors().into_iter().collect();
        candle_core::safetensors::save(&tensors, path)?;
        Ok(())
    }

    pub fn load(&mut self, path: &std::path::Path) -> Result<()> {
        if !path.exists() {
            return Err(Error::Checkpoint(format!(
                "checkpoint file not found: {}",
                path.display()
            )));
        }
        let map = candle_core::safetensors::load(path, &self.device)?;
        self.load_tensors(&map)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_name_keyed_and_order_independent() {
        let dev = Device::Cpu;
        let mut a = ParamRegistry::new(5, &dev);
        let w1 = a.param("x.w", (3, 4), Init::Normal(1.0)).unwrap();
        let _ = a.param("y.w", (2, 2), Init::Normal(1.0)).unwrap();

        let mut b = ParamRegistry::new(5, &dev);
        let _ = b.param("y.w", (2, 2), Init::Normal(1.0)).unwrap();
        let w2 = b.param("x.w", (3, 4), Init::Normal(1.0)).unwrap();

        let v1 = w1.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let v2 = w2.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(v1, v2);
    }

    #[test]
    fn checksum_changes_with_values() {
        let dev = Device::Cpu;
        let mut r = ParamRegistry::new(0, &dev);
        let w = r.param("w", (2, 2), Init::Zeros).unwrap();
        let c0 = r.checksum().unwrap();
        w.set(&Tensor::ones((2, 2), DType::F32, &dev).unwrap()).unwrap();
        let c1 = r.checksum().unwrap();
        assert_ne!(c0, c1);
    }

    #[test]
    fn save_load_roundtrip_is_exact() {
        let dev = Device::Cpu;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.safetensors");
        let mut r = ParamRegistry::new(9, &dev);
        let w = r.param("w", (4, 3), Init::Normal(0.3)).unwrap();
        let before = w.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        r.save(&path).unwrap();

        let mut r2 = ParamRegistry::new(1234, &dev);
        let w2 = r2.param("w", (4, 3), Init::Normal(0.3)).unwrap();
        r2.load(&path).unwrap();
        let after = w2.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn load_rejects_shape_mismatch() {
        let dev = Device::Cpu;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.safetensors");
        let mut r = ParamRegistry::new(9, &dev);
        r.param("w", (4, 3), Init::Zeros).unwrap();
        r.save(&path).unwrap();

        let mut r2 = ParamRegistry::new(9, &dev);
        r2.param("w", (3, 4), Init::Zeros).unwrap();
        assert!(r2.load(&path).is_err());
    }
}
