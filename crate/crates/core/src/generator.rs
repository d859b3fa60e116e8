//! Stacked U-Net generator with deep supervision.
//!
//! U-Net 1 sees the fundus image; U-Net k>1 sees the fundus concatenated with
//! head k-1. Every U-Net ends in a sigmoid head, and the final prediction
//! aggregates all heads (mean by default) when deep supervision is on, or is
//! simply the last head when it is off.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{dropout, relu, sigmoid, RELU_GAIN};
use crate::nn::{BatchNorm2d, Conv2d, ConvTranspose2d, Mode, ParamStore, Scope};

const MAX_DEPTH: usize = 7;
const MAX_UNETS: usize = 5;
/// Number of innermost decoder blocks followed by dropout.
const DROPOUT_BLOCKS: usize = 3;
const IMAGE_CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadAggregation {
    Mean,
    Max,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub num_unets: usize,
    pub unet_depth: usize,
    pub base_channels: usize,
    pub dropout_rate: f64,
    pub deep_supervision: bool,
    pub head_aggregation: HeadAggregation,
    pub image_size: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            num_unets: 3,
            unet_depth: 4,
            base_channels: 32,
            dropout_rate: 0.5,
            deep_supervision: true,
            head_aggregation: HeadAggregation::Mean,
            image_size: 128,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_UNETS).contains(&self.num_unets) {
            return Err(Error::Config(format!(
                "num_unets must be in 1..={MAX_UNETS}, got {}",
                self.num_unets
            )));
        }
        if self.unet_depth == 0 || self.unet_depth > MAX_DEPTH {
            return Err(Error::Config(format!(
                "unet_depth must be in 1..={MAX_DEPTH}, got {}",
                self.unet_depth
            )));
        }
        if self.image_size % (1 << self.unet_depth) != 0 {
            return Err(Error::Config(format!(
                "image size {} cannot be halved {} times",
                self.image_size, self.unet_depth
            )));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate must be in [0,1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// Two 3x3 convolutions, each followed by batch norm and ReLU. The first may be strided.
#[derive(Clone)]
struct ConvBlock {
    conv_a: Conv2d,
    bn_a: BatchNorm2d,
    conv_b: Conv2d,
    bn_b: BatchNorm2d,
}

impl ConvBlock {
    fn new(scope: &mut Scope, c_in: usize, c_out: usize, stride: usize) -> Result<Self> {
        Ok(Self {
            conv_a: Conv2d::new(&mut scope.sub("conv_a"), c_in, c_out, 3, stride, 1, false, RELU_GAIN)?,
            bn_a: BatchNorm2d::new(&mut scope.sub("bn_a"), c_out)?,
            conv_b: Conv2d::new(&mut scope.sub("conv_b"), c_out, c_out, 3, 1, 1, false, RELU_GAIN)?,
            bn_b: BatchNorm2d::new(&mut scope.sub("bn_b"), c_out)?,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let h = relu(&self.bn_a.forward(&self.conv_a.forward(x)?, train)?)?;
        relu(&self.bn_b.forward(&self.conv_b.forward(&h)?, train)?)
    }
}

#[derive(Clone)]
struct DecoderLevel {
    up: ConvTranspose2d,
    block: ConvBlock,
    dropout: bool,
}

#[derive(Clone)]
struct UNet {
    encoder: Vec<ConvBlock>,
    decoder: Vec<DecoderLevel>,
    head: Conv2d,
}

impl UNet {
    fn new(scope: &mut Scope, cfg: &GeneratorConfig, in_channels: usize) -> Result<Self> {
        let depth = cfg.unet_depth;
        let mut encoder = Vec::with_capacity(depth + 1);
        encoder.push(ConvBlock::new(&mut scope.sub("enc0"), in_channels, cfg.channels(0), 1)?);
        for level in 1..=depth {
            encoder.push(ConvBlock::new(
                &mut scope.sub(&format!("enc{level}")),
                cfg.channels(level - 1),
                cfg.channels(level),
                2,
            )?);
        }
        // decoder[i] restores level `depth-1-i`; the first DROPOUT_BLOCKS are innermost
        let mut decoder = Vec::with_capacity(depth);
        for (i, level) in (0..depth).rev().enumerate() {
            let c = cfg.channels(level);
            let mut s = scope.sub(&format!("dec{level}"));
            decoder.push(DecoderLevel {
                up: ConvTranspose2d::new(&mut s.sub("up"), cfg.channels(level + 1), c, 2)?,
                block: ConvBlock::new(&mut s.sub("block"), 2 * c, c, 1)?,
                dropout: i < DROPOUT_BLOCKS,
            });
        }
        let head = Conv2d::new(&mut scope.sub("head"), cfg.channels(0), IMAGE_CHANNELS, 1, 1, 0, true, 1.0)?;
        Ok(Self {
            encoder,
            decoder,
            head,
        })
    }

    fn forward(&self, x: &Tensor, rate: f64, mode: &mut Mode) -> Result<Tensor> {
        let train = mode.is_train();
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut h = x.clone();
        for block in &self.encoder {
            h = block.forward(&h, train)?;
            skips.push(h.clone());
        }
        skips.pop();
        for level in &self.decoder {
            let up = level.up.forward(&h)?;
            let skip = skips.pop().expect("one skip per decoder level");
            h = level.block.forward(&Tensor::cat(&[&up, &skip], 1)?, train)?;
            if level.dropout {
                h = dropout(&h, rate, mode)?;
            }
        }
        sigmoid(&self.head.forward(&h)?)
    }
}

pub struct GeneratorOutput {
    pub final_output: Tensor,
    pub heads: Vec<Tensor>,
}

pub struct Generator {
    cfg: GeneratorConfig,
    seed: u64,
    store: ParamStore,
    unets: Vec<UNet>,
}

/// Builds a generator whose parameter values depend only on `(seed, parameter name)`.
pub fn build_generator(cfg: &GeneratorConfig, seed: u64, dtype: DType) -> Result<Generator> {
    cfg.validate()?;
    let mut store = ParamStore::new(dtype, seed);
    let mut unets = Vec::with_capacity(cfg.num_unets);
    for k in 0..cfg.num_unets {
        let in_channels = if k == 0 { IMAGE_CHANNELS } else { 2 * IMAGE_CHANNELS };
        unets.push(UNet::new(&mut Scope::new(&mut store, format!("unet{k}")), cfg, in_channels)?);
    }
    Ok(Generator {
        cfg: cfg.clone(),
        seed,
        store,
        unets,
    })
}

impl Generator {
    pub fn config(&self) -> &GeneratorConfig {
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

    pub fn parameter_count(&self) -> usize {
        self.store.parameter_count()
    }

    pub fn forward(&self, x: &Tensor, mode: &mut Mode) -> Result<GeneratorOutput> {
        let s = self.cfg.image_size;
        let dims = x.dims();
        if dims.len() != 4 || dims[1] != IMAGE_CHANNELS || dims[2] != s || dims[3] != s {
            return Err(Error::shape(
                format!("Bx{IMAGE_CHANNELS}x{s}x{s}"),
                format!("{dims:?}"),
            ));
        }
        let mut heads: Vec<Tensor> = Vec::with_capacity(self.unets.len());
        for (k, unet) in self.unets.iter().enumerate() {
            let input = match heads.last() {
                Some(prev) if k > 0 => Tensor::cat(&[x, prev], 1)?,
                _ => x.clone(),
            };
            heads.push(unet.forward(&input, self.cfg.dropout_rate, mode)?);
        }
        let final_output = if self.cfg.deep_supervision {
            aggregate_heads(&heads, self.cfg.head_aggregation)?
        } else {
            heads.last().expect("at least one U-Net").clone()
        };
        Ok(GeneratorOutput {
            final_output,
            heads,
        })
    }
}

/// Elementwise mean or max over equally shaped head outputs.
pub fn aggregate_heads(heads: &[Tensor], mode: HeadAggregation) -> Result<Tensor> {
    let first = heads
        .first()
        .ok_or_else(|| Error::Config("cannot aggregate an empty head list".into()))?;
    if let Some(bad) = heads.iter().find(|h| h.dims() != first.dims()) {
        return Err(Error::shape(format!("{:?}", first.dims()), format!("{:?}", bad.dims())));
    }
    let mut acc = first.clone();
    for h in &heads[1..] {
        acc = match mode {
            HeadAggregation::Mean => (acc + h)?,
            HeadAggregation::Max => acc.maximum(h)?,
        };
    }
    Ok(match mode {
        HeadAggregation::Mean => (acc / heads.len() as f64)?,
        HeadAggregation::Max => acc,
    })
}

/// Grows a K=k generator to K=k+1: U-Nets 1..k take the checkpointed weights
/// exactly, U-Net k+1 is freshly initialized from the generator seed.
pub fn grow_stack(
    gen: &Generator,
    ckpt: &BTreeMap<String, Tensor>,
    ckpt_cfg: &GeneratorConfig,
) -> Result<Generator> {
    let k = gen.cfg.num_unets;
    let mut mismatched = Vec::new();
    let mut arch = ckpt_cfg.clone();
    arch.num_unets = k;
    if arch.unet_depth != gen.cfg.unet_depth {
        mismatched.push(format!(
            "unet_depth ({} vs {})",
            arch.unet_depth, gen.cfg.unet_depth
        ));
    }
    if arch.base_channels != gen.cfg.base_channels {
        mismatched.push(format!(
            "base_channels ({} vs {})",
            arch.base_channels, gen.cfg.base_channels
        ));
    }
    if arch.image_size != gen.cfg.image_size {
        mismatched.push(format!(
            "image_size ({} vs {})",
            arch.image_size, gen.cfg.image_size
        ));
    }
    if ckpt_cfg.num_unets != k {
        mismatched.push(format!("num_unets ({} vs {k})", ckpt_cfg.num_unets));
    }
    if !mismatched.is_empty() {
        return Err(Error::CheckpointMismatch { mismatched });
    }
    let mut cfg = gen.cfg.clone();
    cfg.num_unets = k + 1;
    let grown = build_generator(&cfg, gen.seed, gen.dtype())?;
    grown.store.load_filtered(
        ckpt,
        |name| {
            let n = name.strip_prefix("buffer:").unwrap_or(name);
            (0..k).any(|i| n.starts_with(&format!("unet{i}.")))
        },
        true,
    )?;
    Ok(grown)
}
