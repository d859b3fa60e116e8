use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Named trainable parameters plus non-trainable buffers (normalization statistics).
///
/// Names are stable dotted paths such as `unet0.enc1.conv_a.weight`; checkpoints
/// and stack growth rely on them. `BTreeMap` keeps iteration order deterministic.
pub struct ParamStore {
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
    dtype: DType,
    seed: u64,
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Truncated normal (±2σ) with σ = sqrt(gain / fan_in).
    FanIn { fan_in: usize, gain: f64 },
    Const(f64),
}

/// Seeds a generator from `(seed, name)` so every parameter's initial value is
/// independent of construction order and of which other parameters exist.
pub fn named_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

fn truncated_normal(rng: &mut impl Rng, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
            dtype,
            seed,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &Device::Cpu
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        if self.params.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Const(c) => vec![c; n],
            Init::FanIn { fan_in, gain } => {
                let std = (gain / fan_in.max(1) as f64).sqrt();
                let mut rng = named_rng(self.seed, name);
                (0..n).map(|_| truncated_normal(&mut rng, std)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        let v = Var::from_tensor(&t)?;
        self.params.insert(name.to_string(), v.clone());
        Ok(v)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let t = Tensor::full(value, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        let v = Var::from_tensor(&t)?;
        self.buffers.insert(name.to_string(), v.clone());
        Ok(v)
    }

    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Var> {
        &self.buffers
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    /// Parameters and buffers as one flat map, buffers prefixed with `buffer:`.
    pub fn to_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (k, v) in &self.params {
            out.insert(k.clone(), v.as_tensor().clone());
        }
        for (k, v) in &self.buffers {
            out.insert(format!("buffer:{k}"), v.as_tensor().clone());
        }
        out
    }

    /// Overwrites every parameter and buffer from `tensors`; names and shapes must
    /// match exactly. Mismatches are collected and reported together.
    pub fn load_tensors(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        self.load_filtered(tensors, |_| true, true)
    }

    /// Loads only the entries whose name satisfies `keep`. With `strict`, entries in
    /// `tensors` not present here are also reported.
    pub fn load_filtered(
        &self,
        tensors: &BTreeMap<String, Tensor>,
        keep: impl Fn(&str) -> bool,
        strict: bool,
    ) -> Result<()> {
        let mut mismatched = Vec::new();
        let mut updates = Vec::new();
        let all = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), v))
            .chain(self.buffers.iter().map(|(k, v)| (format!("buffer:{k}"), v)));
        let mut expected = 0usize;
        for (name, var) in all {
            if !keep(&name) {
                continue;
            }
            expected += 1;
            match tensors.get(&name) {
                None => mismatched.push(format!("{name} (missing)")),
                Some(t) if t.dims() != var.dims() => mismatched.push(format!(
                    "{name} (shape {:?} vs {:?})",
                    t.dims(),
                    var.dims()
                )),
                Some(t) => updates.push((var, t)),
            }
        }
        if strict {
            for name in tensors.keys().filter(|k| keep(k)) {
                let known = match name.strip_prefix("buffer:") {
                    Some(b) => self.buffers.contains_key(b),
                    None => self.params.contains_key(name),
                };
                if !known {
                    mismatched.push(format!("{name} (unexpected)"));
                }
            }
        }
        if expected == 0 && !tensors.is_empty() {
            mismatched.push("no matching parameters".to_string());
        }
        if !mismatched.is_empty() {
            return Err(Error::CheckpointMismatch { mismatched });
        }
        for (var, t) in updates {
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_tensors(&self.to_tensors(), path)
    }

    /// SHA-256 over names, shapes and raw little-endian values.
    pub fn digest(&self) -> Result<String> {
        tensors_digest(&self.to_tensors())
    }
}

pub fn save_tensors(tensors: &BTreeMap<String, Tensor>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let map: std::collections::HashMap<String, Tensor> =
        tensors.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    candle_core::safetensors::save(&map, path)?;
    Ok(())
}

pub fn load_tensors(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    if !path.exists() {
        return Err(Error::Checkpoint(format!(
            "checkpoint {} does not exist",
            path.display()
        )));
    }
    let map = candle_core::safetensors::load(path, &Device::Cpu)?;
    Ok(map.into_iter().collect())
}

pub fn tensors_digest(tensors: &BTreeMap<String, Tensor>) -> Result<String> {
    let mut h = Sha256::new();
    for (name, t) in tensors {
        h.update(name.as_bytes());
        for d in t.dims() {
            h.update((*d as u64).to_le_bytes());
        }
        let flat = t.flatten_all()?;
        match t.dtype() {
            DType::F64 => {
                for v in flat.to_vec1::<f64>()? {
                    h.update(v.to_le_bytes());
                }
            }
            _ => {
                for v in flat.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                    h.update(v.to_le_bytes());
                }
            }
        }
    }
    Ok(hex::encode(h.finalize()))
}
