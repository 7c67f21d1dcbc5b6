//! Named parameter storage shared by every network in the crate.
//!
//! Trainable entries are `candle` variables; buffers (frozen noise maps, the
//! mean latent) are plain tensors that never receive gradients. Entries are
//! kept in name order so iteration, hashing and serialization are
//! deterministic.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
enum Entry {
    Param(Var),
    Buffer(Tensor),
}

impl Entry {
    fn tensor(&self) -> &Tensor {
        match self {
            Entry::Param(v) => v.as_tensor(),
            Entry::Buffer(t) => t,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_param(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let var = Var::from_tensor(&value.to_dtype(DType::F32)?.contiguous()?)?;
        self.insert(name.into(), Entry::Param(var))
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let t = value.to_dtype(DType::F32)?.contiguous()?;
        self.insert(name.into(), Entry::Buffer(t))
    }

    fn insert(&mut self, name: String, entry: Entry) -> Result<()> {
        if self.entries.contains_key(&name) {
            return Err(Error::InvalidParameter(format!("duplicate parameter `{name}`")));
        }
        self.entries.insert(name, entry);
        Ok(())
    }

    /// Replaces a buffer's value; the shape must stay the same.
    pub fn set_buffer(&mut self, name: &str, value: Tensor) -> Result<()> {
        match self.entries.get_mut(name) {
            Some(Entry::Buffer(t)) => {
                if t.dims() != value.dims() {
                    return Err(Error::ShapeMismatch(format!(
                        "buffer `{name}` is {:?}, new value is {:?}",
                        t.dims(),
                        value.dims()
                    )));
                }
                *t = value.to_dtype(DType::F32)?.contiguous()?;
                Ok(())
            }
            _ => Err(Error::InvalidParameter(format!("no buffer named `{name}`"))),
        }
    }

    /// Fetches an entry. With `track` the tensor stays connected to its
    /// variable so gradients flow to it; without, it is detached.
    pub fn get(&self, name: &str, track: bool) -> Result<Tensor> {
        match self.entries.get(name) {
            Some(Entry::Param(v)) if track => Ok(v.as_tensor().clone()),
            Some(e) => Ok(e.tensor().detach()),
            None => Err(Error::InvalidParameter(format!("missing parameter `{name}`"))),
        }
    }

    pub fn var(&self, name: &str) -> Result<&Var> {
        match self.entries.get(name) {
            Some(Entry::Param(v)) => Ok(v),
            _ => Err(Error::InvalidParameter(format!("no trainable parameter `{name}`"))),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn param_names(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|(_, e)| matches!(e, Entry::Param(_)))
            .map(|(k, _)| k.as_str())
            .collect()
    }

    /// Trainable variables in name order.
    pub fn trainable(&self) -> Vec<Var> {
        self.entries
            .values()
            .filter_map(|e| match e {
                Entry::Param(v) => Some(v.clone()),
                Entry::Buffer(_) => None,
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.entries
            .values()
            .filter(|e| matches!(e, Entry::Param(_)))
            .map(|e| e.tensor().elem_count())
            .sum()
    }

    /// Copies every tensor into fresh storage, so updates to one store never
    /// reach the other.
    pub fn deep_copy(&self) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (k, e) in &self.entries {
            let copy = e.tensor().detach().copy()?;
            let entry = match e {
                Entry::Param(_) => Entry::Param(Var::from_tensor(&copy)?),
                Entry::Buffer(_) => Entry::Buffer(copy),
            };
            entries.insert(k.clone(), entry);
        }
        Ok(Self { entries })
    }

    /// SHA-256 over names, kinds, shapes and raw little-endian values.
    pub fn content_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, e) in &self.entries {
            h.update(name.as_bytes());
            h.update([matches!(e, Entry::Param(_)) as u8]);
            for d in e.tensor().dims() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in e.tensor().flatten_all()?.to_vec1::<f32>()? {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Bitwise equality of every entry.
    pub fn bit_eq(&self, other: &ParamStore) -> Result<bool> {
        if self.entries.len() != other.entries.len() {
            return Ok(false);
        }
        for ((ka, a), (kb, b)) in self.entries.iter().zip(&other.entries) {
            if ka != kb || a.tensor().dims() != b.tensor().dims() {
                return Ok(false);
            }
            let va = a.tensor().flatten_all()?.to_vec1::<f32>()?;
            let vb = b.tensor().flatten_all()?.to_vec1::<f32>()?;
            if va.iter().zip(&vb).any(|(x, y)| x.to_bits() != y.to_bits()) {
                return Ok(false);
            }
        }
        Ok(true)
    }

    pub fn save_safetensors(&self, path: impl AsRef<Path>) -> Result<()> {
        let map: HashMap<String, Tensor> = self
            .entries
            .iter()
            .map(|(k, e)| (k.clone(), e.tensor().detach()))
            .collect();
        candle_core::safetensors::save(&map, path.as_ref())?;
        Ok(())
    }

    /// Overwrites every entry with values read from `path`. The file must
    /// hold exactly the entries of this store with matching shapes.
    pub fn load_safetensors(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::load(path, "weights", e))?;
        let loaded = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)
            .map_err(|e| Error::load(path, "weights", e))?;
        for (name, entry) in self.entries.iter_mut() {
            let value = loaded
                .get(name)
                .ok_or_else(|| Error::load(path, name.clone(), "missing from weight file"))?;
            if value.dims() != entry.tensor().dims() {
                return Err(Error::load(
                    path,
                    name.clone(),
                    format!("shape {:?}, expected {:?}", value.dims(), entry.tensor().dims()),
                ));
            }
            let value = value.to_dtype(DType::F32)?;
            match entry {
                Entry::Param(v) => v.set(&value)?,
                Entry::Buffer(t) => *t = value,
            }
        }
        if let Some(extra) = loaded.keys().find(|k| !self.entries.contains_key(*k)) {
            return Err(Error::load(path, extra.clone(), "unexpected entry in weight file"));
        }
        Ok(())
    }
}

/// Seeded initializer; all random tensors in the crate come through here.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal_vec(&mut self, n: usize, std: f32) -> Vec<f32> {
        (0..n)
            .map(|_| {
                let v: f32 = StandardNormal.sample(&mut self.rng);
                v * std
            })
            .collect()
    }

    pub fn normal<S: Into<Shape>>(&mut self, shape: S, std: f32) -> Result<Tensor> {
        let shape = shape.into();
        let data = self.normal_vec(shape.elem_count(), std);
        Ok(Tensor::from_vec(data, shape, &Device::Cpu)?)
    }

    pub fn constant<S: Into<Shape>>(&mut self, shape: S, value: f32) -> Result<Tensor> {
        Ok(Tensor::full(value, shape, &Device::Cpu)?)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}
