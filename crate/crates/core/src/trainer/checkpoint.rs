use std::collections::BTreeMap;
use std::path::Path;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::schedule::TrainConfig;
use crate::discriminator::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::losses::LossWeights;
use crate::nn::params::{load_tensors, save_tensors, tensors_digest};

pub const GENERATOR_FILE: &str = "generator.safetensors";
pub const DISCRIMINATOR_FILE: &str = "discriminator.safetensors";
pub const OPTIMIZER_FILE: &str = "optimizer.safetensors";
pub const META_FILE: &str = "checkpoint.json";

/// Everything needed to rebuild the models and continue training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub train: TrainConfig,
    pub losses: LossWeights,
    pub seed: u64,
    /// Index into `train.stages`.
    pub stage_index: usize,
    /// Stack size of the stage.
    pub stage: usize,
    /// Epochs completed within the stage.
    pub epoch: usize,
    pub global_step: u64,
    pub adam_g_step: u64,
    pub adam_d_step: u64,
    pub parameter_count: usize,
    pub generator_digest: String,
    pub discriminator_digest: String,
}

pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub generator: BTreeMap<String, Tensor>,
    pub discriminator: BTreeMap<String, Tensor>,
    /// Optimizer moments prefixed `g.` / `d.`.
    pub optimizer: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_tensors(&self.generator, &dir.join(GENERATOR_FILE))?;
        save_tensors(&self.discriminator, &dir.join(DISCRIMINATOR_FILE))?;
        save_tensors(&self.optimizer, &dir.join(OPTIMIZER_FILE))?;
        let meta = dir.join(META_FILE);
        std::fs::write(&meta, serde_json::to_string_pretty(&self.meta)?).map_err(|e| Error::io(&meta, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(META_FILE);
        if !meta_path.exists() {
            return Err(Error::Checkpoint(format!(
                "{} is not a checkpoint directory (no {META_FILE})",
                dir.display()
            )));
        }
        let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text)?;
        let ckpt = Self {
            meta,
            generator: load_tensors(&dir.join(GENERATOR_FILE))?,
            discriminator: load_tensors(&dir.join(DISCRIMINATOR_FILE))?,
            optimizer: load_tensors(&dir.join(OPTIMIZER_FILE))?,
        };
        if tensors_digest(&ckpt.generator)? != ckpt.meta.generator_digest
            || tensors_digest(&ckpt.discriminator)? != ckpt.meta.discriminator_digest
        {
            return Err(Error::Checkpoint(format!(
                "{}: tensor digests do not match the recorded metadata",
                dir.display()
            )));
        }
        Ok(ckpt)
    }

    /// Digest over generator, discriminator and optimizer tensors.
    pub fn digest(&self) -> Result<String> {
        let mut all = BTreeMap::new();
        for (prefix, map) in [("G:", &self.generator), ("D:", &self.discriminator), ("O:", &self.optimizer)] {
            for (k, t) in map {
                all.insert(format!("{prefix}{k}"), t.clone());
            }
        }
        tensors_digest(&all)
    }
}

/// Loads just the discriminator weights and config from a checkpoint directory
/// or a bare `discriminator.safetensors` file next to a `checkpoint.json`.
pub fn load_discriminator_tensors(path: &Path) -> Result<(DiscriminatorConfig, BTreeMap<String, Tensor>)> {
    let dir = if path.is_dir() {
        path.to_path_buf()
    } else {
        path.parent().map(Path::to_path_buf).unwrap_or_default()
    };
    let meta_path = dir.join(META_FILE);
    if !meta_path.exists() {
        return Err(Error::Checkpoint(format!(
            "discriminator checkpoint {} not found",
            path.display()
        )));
    }
    let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    let tensors = load_tensors(&dir.join(DISCRIMINATOR_FILE))?;
    Ok((meta.discriminator, tensors))
}
