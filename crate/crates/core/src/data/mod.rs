//! Fundus/heightmap pairs: ingestion, preprocessing, flip augmentation,
//! source-grouped splitting and a synthetic pair generator.

pub mod clahe;
pub mod io;
pub mod split;
pub mod synth;

use std::fmt;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::codec::HeightmapImage;
use crate::error::{Error, Result};
use crate::image::{images_to_tensor, RgbImage};

pub use clahe::{clahe_channel, clahe_rgb, ClaheColorMode, ClaheConfig};
pub use io::{load_dataset, load_pair, read_manifest, resolve, write_dataset, ManifestEntry, PrepRecord, PREP_RECORD};
pub use split::{make_splits, split_ids, Partition, SplitRatios};
pub use synth::{synth_generate, synth_generate_with, SynthConfig};

/// Side length the generator expects after ingestion.
pub const DEFAULT_IMAGE_SIZE: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueDomain {
    Raw0To255,
    Normalized0To1,
}

/// A fundus photograph together with the processing it has been through.
#[derive(Clone, Debug, PartialEq)]
pub struct FundusImage {
    pixels: RgbImage,
    domain: ValueDomain,
    preprocessed: bool,
}

impl FundusImage {
    /// Wraps raw `[0,255]` pixels.
    pub fn raw(pixels: RgbImage) -> Result<Self> {
        if let Some(v) = pixels.data.iter().find(|v| !(0.0..=255.0).contains(*v)) {
            return Err(Error::Data(format!("raw fundus value {v} outside [0,255]")));
        }
        Ok(Self {
            pixels,
            domain: ValueDomain::Raw0To255,
            preprocessed: false,
        })
    }

    pub fn pixels(&self) -> &RgbImage {
        &self.pixels
    }

    pub fn domain(&self) -> ValueDomain {
        self.domain
    }

    pub fn is_preprocessed(&self) -> bool {
        self.preprocessed
    }

    pub fn height(&self) -> usize {
        self.pixels.height
    }

    pub fn width(&self) -> usize {
        self.pixels.width
    }

    fn require_raw(&self, op: &'static str) -> Result<()> {
        match self.domain {
            ValueDomain::Raw0To255 => Ok(()),
            ValueDomain::Normalized0To1 => Err(Error::NotRaw(op)),
        }
    }

    /// Divides every value by 255.
    pub fn normalize(&self) -> Result<Self> {
        if self.domain == ValueDomain::Normalized0To1 {
            return Err(Error::AlreadyNormalized);
        }
        Ok(Self {
            pixels: self.pixels.map(|v| v / 255.0),
            domain: ValueDomain::Normalized0To1,
            preprocessed: self.preprocessed,
        })
    }

    pub fn clahe(&self, cfg: &ClaheConfig) -> Result<Self> {
        self.require_raw("clahe")?;
        Ok(Self {
            pixels: clahe_rgb(&self.pixels, cfg)?,
            domain: ValueDomain::Raw0To255,
            preprocessed: true,
        })
    }

    /// Bilinear resize; only meaningful before CLAHE, but allowed in either domain.
    pub fn resize(&self, height: usize, width: usize) -> Self {
        if (height, width) == (self.height(), self.width()) {
            return self.clone();
        }
        let pixels = self.pixels.resize_bilinear(height, width);
        let hi = match self.domain {
            ValueDomain::Raw0To255 => 255.0,
            ValueDomain::Normalized0To1 => 1.0,
        };
        Self {
            pixels: pixels.map(|v| v.clamp(0.0, hi)),
            ..self.clone()
        }
    }

    fn transformed(&self, f: impl Fn(&RgbImage) -> RgbImage) -> Self {
        Self {
            pixels: f(&self.pixels),
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentationTag {
    None,
    Hflip,
    Vflip,
    Hvflip,
}

impl AugmentationTag {
    pub const ALL: [AugmentationTag; 4] = [
        AugmentationTag::None,
        AugmentationTag::Hflip,
        AugmentationTag::Vflip,
        AugmentationTag::Hvflip,
    ];

    pub fn suffix(self) -> &'static str {
        match self {
            AugmentationTag::None => "",
            AugmentationTag::Hflip => "#hflip",
            AugmentationTag::Vflip => "#vflip",
            AugmentationTag::Hvflip => "#hvflip",
        }
    }

    pub fn apply(self, img: &RgbImage) -> RgbImage {
        match self {
            AugmentationTag::None => img.clone(),
            AugmentationTag::Hflip => img.hflip(),
            AugmentationTag::Vflip => img.vflip(),
            AugmentationTag::Hvflip => img.hflip().vflip(),
        }
    }
}

/// An aligned fundus/heightmap pair. `source_id` names the original image so
/// flipped variants can be kept together when splitting.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub id: String,
    pub source_id: String,
    pub fundus: FundusImage,
    pub target: HeightmapImage,
    pub split: Option<Split>,
    pub augmentation_tag: AugmentationTag,
}

impl SamplePair {
    pub fn new(id: impl Into<String>, fundus: FundusImage, target: HeightmapImage) -> Result<Self> {
        let id = id.into();
        if (fundus.height(), fundus.width()) != (target.height(), target.width()) {
            return Err(Error::Data(format!(
                "pair {id}: fundus is {}x{} but heightmap is {}x{}",
                fundus.height(),
                fundus.width(),
                target.height(),
                target.width()
            )));
        }
        Ok(Self {
            source_id: id.clone(),
            id,
            fundus,
            target,
            split: None,
            augmentation_tag: AugmentationTag::None,
        })
    }

    fn flipped(&self, tag: AugmentationTag) -> Self {
        Self {
            id: format!("{}{}", self.source_id, tag.suffix()),
            source_id: self.source_id.clone(),
            fundus: self.fundus.transformed(|p| tag.apply(p)),
            target: HeightmapImage {
                pixels: tag.apply(&self.target.pixels),
            },
            split: self.split,
            augmentation_tag: tag,
        }
    }
}

/// Returns `[identity, hflip, vflip, hvflip]` with both members transformed alike.
pub fn augment_flips(pair: &SamplePair) -> Result<Vec<SamplePair>> {
    if pair.augmentation_tag != AugmentationTag::None {
        return Err(Error::AlreadyAugmented(pair.id.clone()));
    }
    Ok(AugmentationTag::ALL.iter().map(|&t| pair.flipped(t)).collect())
}

pub fn augment_all(pairs: &[SamplePair]) -> Result<Vec<SamplePair>> {
    let mut out = Vec::with_capacity(pairs.len() * 4);
    for p in pairs {
        out.extend(augment_flips(p)?);
    }
    Ok(out)
}

/// Resize (bilinear for the fundus, nearest for the color-coded target so no
/// colors off the colormap appear), then CLAHE, then normalization.
pub fn preprocess(pair: &SamplePair, size: usize, clahe: Option<&ClaheConfig>) -> Result<SamplePair> {
    let mut fundus = pair.fundus.resize(size, size);
    if let Some(cfg) = clahe {
        if !fundus.is_preprocessed() {
            fundus = fundus.clahe(cfg)?;
        }
    }
    if fundus.domain() == ValueDomain::Raw0To255 {
        fundus = fundus.normalize()?;
    }
    let target = if (pair.target.height(), pair.target.width()) == (size, size) {
        pair.target.clone()
    } else {
        HeightmapImage::new(pair.target.pixels.resize_nearest(size, size))?
    };
    Ok(SamplePair {
        fundus,
        target,
        ..pair.clone()
    })
}

/// `(x, y)` NCHW tensors for a batch of normalized pairs.
pub fn batch_tensors(pairs: &[&SamplePair], dtype: DType) -> Result<(Tensor, Tensor)> {
    if let Some(p) = pairs
        .iter()
        .find(|p| p.fundus.domain() != ValueDomain::Normalized0To1)
    {
        return Err(Error::Data(format!("pair {} is not normalized", p.id)));
    }
    let xs: Vec<RgbImage> = pairs.iter().map(|p| p.fundus.pixels().clone()).collect();
    let ys: Vec<RgbImage> = pairs.iter().map(|p| p.target.pixels.clone()).collect();
    Ok((images_to_tensor(&xs, dtype)?, images_to_tensor(&ys, dtype)?))
}
