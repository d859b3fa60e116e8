//! Conditional discriminator over `concat(fundus, heightmap)`.
//!
//! Eight Conv-BatchNorm-LeakyReLU blocks (no normalization on the first, stride
//! 2 on odd blocks) followed by either a fully connected image-level head or a
//! 1-channel patch map. Intermediate block outputs at the configured tap
//! indices feed the perceptual loss and the LPIPS metric.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{leaky_relu, sigmoid};
use crate::nn::{BatchNorm2d, Conv2d, Linear, ParamStore, Scope};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiscriminatorMode {
    Image,
    Patch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    pub mode: DiscriminatorMode,
    pub num_conv_layers: usize,
    /// 1-based block indices whose outputs are exposed as feature taps.
    pub tap_indices: Vec<usize>,
    pub leaky_slope: f64,
    pub base_channels: usize,
    pub max_channels: usize,
    pub image_size: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            mode: DiscriminatorMode::Image,
            num_conv_layers: 8,
            tap_indices: vec![1, 4, 6, 8],
            leaky_slope: 0.2,
            base_channels: 32,
            max_channels: 256,
            image_size: 128,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_conv_layers == 0 {
            return Err(Error::Config("discriminator needs at least one block".into()));
        }
        if self.tap_indices.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!(
                "tap indices {:?} must be strictly increasing",
                self.tap_indices
            )));
        }
        if let Some(&bad) = self
            .tap_indices
            .iter()
            .find(|&&t| t == 0 || t > self.num_conv_layers)
        {
            return Err(Error::Config(format!(
                "tap index {bad} outside blocks 1..={}",
                self.num_conv_layers
            )));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return Err(Error::Config("leaky_slope must be in [0,1)".into()));
        }
        if self.base_channels == 0 || self.max_channels < self.base_channels {
            return Err(Error::Config("invalid discriminator channel plan".into()));
        }
        if self.image_size == 0 {
            return Err(Error::Config("image_size must be positive".into()));
        }
        Ok(())
    }

    /// Output channels of 1-based block `i`: doubles at every stride-2 block after the first.
    pub fn block_channels(&self, i: usize) -> usize {
        (self.base_channels << ((i - 1) / 2)).min(self.max_channels)
    }

    pub fn block_stride(&self, i: usize) -> usize {
        if i % 2 == 1 {
            2
        } else {
            1
        }
    }

    /// Spatial size after 1-based block `i`.
    pub fn block_size(&self, i: usize) -> usize {
        (1..=i).fold(self.image_size, |s, b| {
            if self.block_stride(b) == 2 {
                (s + 1) / 2
            } else {
                s
            }
        })
    }
}

/// Feature map of one tapped block with its recorded width, height and depth.
#[derive(Clone, Debug)]
pub struct Tap {
    pub index: usize,
    pub features: Tensor,
    pub width: usize,
    pub height: usize,
    pub depth: usize,
}

impl Tap {
    /// `width · height · depth`, the per-sample element count used for normalization.
    pub fn volume(&self) -> usize {
        self.width * self.height * self.depth
    }
}

#[derive(Clone, Debug)]
pub struct FeatureTaps {
    pub taps: Vec<Tap>,
}

impl FeatureTaps {
    pub fn detach(&self) -> Self {
        Self {
            taps: self
                .taps
                .iter()
                .map(|t| Tap {
                    features: t.features.detach(),
                    ..t.clone()
                })
                .collect(),
        }
    }
}

struct Block {
    conv: Conv2d,
    norm: Option<BatchNorm2d>,
}

enum Head {
    Image(Linear),
    Patch(Conv2d),
}

pub struct Discriminator {
    cfg: DiscriminatorConfig,
    seed: u64,
    store: ParamStore,
    blocks: Vec<Block>,
    head: Head,
}

pub fn build_discriminator(cfg: &DiscriminatorConfig, seed: u64, dtype: DType) -> Result<Discriminator> {
    cfg.validate()?;
    let mut store = ParamStore::new(dtype, seed);
    let gain = 2.0 / (1.0 + cfg.leaky_slope * cfg.leaky_slope);
    let mut blocks = Vec::with_capacity(cfg.num_conv_layers);
    let mut c_in = 6;
    for i in 1..=cfg.num_conv_layers {
        let c_out = cfg.block_channels(i);
        let mut s = Scope::new(&mut store, format!("block{i}"));
        let conv = Conv2d::new(&mut s.sub("conv"), c_in, c_out, 3, cfg.block_stride(i), 1, i == 1, gain)?;
        let norm = if i == 1 {
            None
        } else {
            Some(BatchNorm2d::new(&mut s.sub("bn"), c_out)?)
        };
        blocks.push(Block { conv, norm });
        c_in = c_out;
    }
    let side = cfg.block_size(cfg.num_conv_layers);
    let mut s = Scope::new(&mut store, "head");
    let head = match cfg.mode {
        DiscriminatorMode::Image => Head::Image(Linear::new(&mut s, c_in * side * side, 1)?),
        DiscriminatorMode::Patch => Head::Patch(Conv2d::new(&mut s, c_in, 1, 3, 1, 1, true, 1.0)?),
    };
    Ok(Discriminator {
        cfg: cfg.clone(),
        seed,
        store,
        blocks,
        head,
    })
}

impl Discriminator {
    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Returns per-sample probabilities `(B, N)` (`N = 1` in image mode, patch count
    /// otherwise) and the configured feature taps.
    pub fn forward(&self, x: &Tensor, y: &Tensor, train: bool) -> Result<(Tensor, FeatureTaps)> {
        let s = self.cfg.image_size;
        let (xd, yd) = (x.dims(), y.dims());
        if xd != yd {
            return Err(Error::shape(format!("heightmap shaped like fundus {xd:?}"), format!("{yd:?}")));
        }
        if xd.len() != 4 || xd[1] != 3 || xd[2] != s || xd[3] != s {
            return Err(Error::shape(format!("Bx3x{s}x{s}"), format!("{xd:?}")));
        }
        let mut h = Tensor::cat(&[x, y], 1)?;
        let mut taps = Vec::with_capacity(self.cfg.tap_indices.len());
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.conv.forward(&h)?;
            if let Some(norm) = &block.norm {
                h = norm.forward(&h, train)?;
            }
            h = leaky_relu(&h, self.cfg.leaky_slope)?;
            if self.cfg.tap_indices.contains(&(i + 1)) {
                let (_, depth, height, width) = h.dims4()?;
                taps.push(Tap {
                    index: i + 1,
                    features: h.clone(),
                    width,
                    height,
                    depth,
                });
            }
        }
        let b = h.dim(0)?;
        let logits = match &self.head {
            Head::Image(fc) => fc.forward(&h.reshape((b, ()))?)?,
            Head::Patch(conv) => conv.forward(&h)?.reshape((b, ()))?,
        };
        Ok((sigmoid(&logits)?, FeatureTaps { taps }))
    }

    /// Features only, with the classifier head skipped.
    pub fn taps(&self, x: &Tensor, y: &Tensor, train: bool) -> Result<FeatureTaps> {
        Ok(self.forward(x, y, train)?.1)
    }
}
