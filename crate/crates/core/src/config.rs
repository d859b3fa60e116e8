//! Serializable run configuration (TOML or JSON), the output directory tree and
//! the run manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{ClaheConfig, SplitRatios, SynthConfig};
use crate::discriminator::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::losses::LossWeights;
use crate::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    /// 64×64 images, narrow networks, 18 epochs.
    Desk,
    /// The full 128×128 configuration.
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sweep {
    StackDepth,
    Supervision,
    PixelNorm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub data_root: PathBuf,
    pub out_dir: PathBuf,
    pub colormap: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_root: PathBuf::from("data"),
            out_dir: PathBuf::from("runs/default"),
            colormap: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub sweeps: Vec<Sweep>,
    /// Stack sizes for the stack-depth sweep.
    pub stack_depths: Vec<usize>,
    /// Test samples written to the per-head image dumps.
    pub head_dump_samples: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            sweeps: vec![Sweep::Supervision, Sweep::PixelNorm],
            stack_depths: vec![1, 2, 3, 4, 5],
            head_dump_samples: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub paths: Paths,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub losses: LossWeights,
    pub train: TrainConfig,
    pub clahe: ClaheConfig,
    pub splits: SplitRatios,
    pub synth: SynthConfig,
    pub ablation: AblationConfig,
    /// Apply the four-way flip augmentation to the training split.
    pub augment: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_scale(Scale::Full)
    }
}

impl RunConfig {
    pub fn for_scale(scale: Scale) -> Self {
        let mut cfg = Self {
            paths: Paths::default(),
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            losses: LossWeights::default(),
            train: TrainConfig::default(),
            clahe: ClaheConfig::default(),
            splits: SplitRatios::default(),
            synth: SynthConfig::default(),
            ablation: AblationConfig::default(),
            augment: true,
        };
        if scale == Scale::Desk {
            cfg.generator.image_size = 64;
            cfg.generator.unet_depth = 3;
            cfg.generator.base_channels = 8;
            cfg.discriminator.image_size = 64;
            cfg.discriminator.base_channels = 8;
            cfg.discriminator.max_channels = 32;
            cfg.train.epochs = 18;
            cfg.train.val_every = 6;
            cfg.clahe.tile_grid = (4, 4);
            cfg.augment = false;
        }
        cfg
    }

    pub fn image_size(&self) -> usize {
        self.generator.image_size
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.train.validate()?;
        self.splits.validate()?;
        if self.generator.image_size != self.discriminator.image_size {
            return Err(Error::Config(format!(
                "generator.image_size {} != discriminator.image_size {}",
                self.generator.image_size, self.discriminator.image_size
            )));
        }
        if self.losses.lambda_per_tap.len() != self.discriminator.tap_indices.len() {
            return Err(Error::Config(format!(
                "losses.lambda_per_tap has {} entries for {} taps",
                self.losses.lambda_per_tap.len(),
                self.discriminator.tap_indices.len()
            )));
        }
        Ok(())
    }

    /// Reads TOML (`.toml`) or JSON (anything else), then validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            serde_json::from_str(&text)?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = if path.extension().is_some_and(|e| e == "toml") {
            toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?
        } else {
            serde_json::to_string_pretty(self)?
        };
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// SHA-256 of the canonical JSON form, excluding output/input paths so that
    /// the same experiment in a different directory has the same digest.
    pub fn digest(&self) -> Result<String> {
        let mut c = self.clone();
        c.paths = Paths::default();
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&c)?)))
    }
}

pub const RUN_MANIFEST: &str = "run_manifest.json";

/// `root/{checkpoints,reports,figures,logs}`.
#[derive(Clone, Debug)]
pub struct OutputTree {
    pub root: PathBuf,
}

impl OutputTree {
    pub fn create(root: &Path) -> Result<Self> {
        let tree = Self {
            root: root.to_path_buf(),
        };
        for d in [tree.checkpoints(), tree.reports(), tree.figures(), tree.logs()] {
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        Ok(tree)
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn figures(&self) -> PathBuf {
        self.root.join("figures")
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub git_hash: String,
    pub seed: u64,
    pub config_digest: String,
    pub version: String,
}

impl RunManifest {
    pub fn new(command: &str, cfg: &RunConfig) -> Result<Self> {
        Ok(Self {
            command: command.to_string(),
            git_hash: git_hash(),
            seed: cfg.train.seed,
            config_digest: cfg.digest()?,
            version: env!("CARGO_PKG_VERSION").to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn git_hash() -> String {
    std::process::Command::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_and_json_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::for_scale(Scale::Desk);
        for name in ["run.toml", "run.json"] {
            let p = dir.path().join(name);
            cfg.save(&p).unwrap();
            assert_eq!(RunConfig::load(&p).unwrap(), cfg);
        }
    }

    #[test]
    fn digest_ignores_paths_but_not_settings() {
        let a = RunConfig::for_scale(Scale::Desk);
        let mut b = a.clone();
        b.paths.out_dir = PathBuf::from("elsewhere");
        assert_eq!(a.digest().unwrap(), b.digest().unwrap());
        b.train.seed = 99;
        assert_ne!(a.digest().unwrap(), b.digest().unwrap());
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[train]\nseed = 5\nepochs = 3\n").unwrap();
        let c = RunConfig::load(&p).unwrap();
        assert_eq!(c.train.seed, 5);
        assert_eq!(c.train.lr_initial, 1e-3);
        assert_eq!(c.generator.num_unets, 3);
    }

    #[test]
    fn mismatched_sizes_are_rejected() {
        let mut c = RunConfig::for_scale(Scale::Desk);
        c.discriminator.image_size = 128;
        assert!(c.validate().is_err());
    }
}
