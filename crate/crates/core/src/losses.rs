//! Training objectives. Every loss is mean-reduced, so replicating a batch leaves it unchanged.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::discriminator::FeatureTaps;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PixelNorm {
    L1,
    L2,
}

/// Direction of the perceptual term in the discriminator objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscriminatorPerceptualSign {
    /// The discriminator minimizes `-perceptual`, pushing real/fake features apart.
    MaximizeDiscrepancy,
    /// The discriminator minimizes `+perceptual`.
    MinimizeDiscrepancy,
}

/// Least-squares targets: `a` for fakes and `b` for reals in the discriminator
/// objective, `c` for fakes in the generator objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LsganTargets {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Default for LsganTargets {
    fn default() -> Self {
        Self { a: 0.0, b: 1.0, c: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha_perceptual: f64,
    pub alpha_pixel: f64,
    pub alpha_adv: f64,
    pub lambda_per_tap: Vec<f64>,
    pub pixel_norm: PixelNorm,
    pub lsgan_targets: LsganTargets,
    pub d_perceptual_weight: f64,
    pub d_perceptual_sign: DiscriminatorPerceptualSign,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_perceptual: 100.0,
            alpha_pixel: 1.0,
            alpha_adv: 50.0,
            lambda_per_tap: vec![5.0, 1.0, 5.0, 5.0],
            pixel_norm: PixelNorm::L2,
            lsgan_targets: LsganTargets::default(),
            d_perceptual_weight: 1.0,
            d_perceptual_sign: DiscriminatorPerceptualSign::MaximizeDiscrepancy,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub adversarial: f64,
    pub pixel: f64,
    pub perceptual: f64,
    pub total: f64,
}

fn check_same(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("{:?}", a.dims()), format!("{:?}", b.dims())));
    }
    Ok(())
}

/// `½·mean[(real − b)²] + ½·mean[(fake − a)²]`.
pub fn lsgan_d_loss(real_prob: &Tensor, fake_prob: &Tensor, targets: LsganTargets) -> Result<Tensor> {
    check_same(real_prob, fake_prob)?;
    let real = (real_prob - targets.b)?.sqr()?.mean_all()?;
    let fake = (fake_prob - targets.a)?.sqr()?.mean_all()?;
    Ok(((real + fake)? * 0.5)?)
}

/// `½·mean[(fake − c)²]`.
pub fn lsgan_g_loss(fake_prob: &Tensor, targets: LsganTargets) -> Result<Tensor> {
    Ok(((fake_prob - targets.c)?.sqr()?.mean_all()? * 0.5)?)
}

pub fn pixel_loss(generated: &Tensor, target: &Tensor, norm: PixelNorm) -> Result<Tensor> {
    check_same(generated, target)?;
    let diff = (generated - target)?;
    Ok(match norm {
        PixelNorm::L1 => diff.abs()?.mean_all()?,
        PixelNorm::L2 => diff.sqr()?.mean_all()?,
    })
}

/// `Σᵢ λᵢ · ‖Dᵢ(x,y) − Dᵢ(x,ŷ)‖₁ / (wᵢhᵢdᵢ)`, additionally averaged over the batch.
pub fn perceptual_loss(real: &FeatureTaps, fake: &FeatureTaps, lambda: &[f64]) -> Result<Tensor> {
    if real.taps.len() != fake.taps.len() || lambda.len() != real.taps.len() {
        return Err(Error::shape(
            format!("{} taps and {} weights", real.taps.len(), real.taps.len()),
            format!("{} taps and {} weights", fake.taps.len(), lambda.len()),
        ));
    }
    let mut total: Option<Tensor> = None;
    for ((r, f), &l) in real.taps.iter().zip(&fake.taps).zip(lambda) {
        check_same(&r.features, &f.features)?;
        // mean over B·d·h·w elements == batch mean of the per-sample L1 / (w·h·d)
        let term = ((&r.features - &f.features)?.abs()?.mean_all()? * l)?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => Err(Error::Config("perceptual loss needs at least one tap".into())),
    }
}

/// Weighted generator objective; `parts` are (adversarial, pixel, perceptual) loss tensors.
pub struct GeneratorParts {
    pub adversarial: Tensor,
    pub pixel: Tensor,
    pub perceptual: Tensor,
}

/// `α₁·perceptual + α₂·pixel + α₃·adversarial`, returned as a differentiable tensor plus the logged values.
pub fn generator_total(parts: &GeneratorParts, w: &LossWeights) -> Result<(Tensor, LossBreakdown)> {
    let value = |t: &Tensor| -> Result<f64> { crate::nn::layers::scalar(t) };
    let adversarial = value(&parts.adversarial)?;
    let pixel = value(&parts.pixel)?;
    let perceptual = value(&parts.perceptual)?;
    for (name, v) in [("adversarial", adversarial), ("pixel", pixel), ("perceptual", perceptual)] {
        if !v.is_finite() {
            return Err(Error::Divergence {
                term: name.to_string(),
                recent: Vec::new(),
            });
        }
    }
    let total = ((&parts.perceptual * w.alpha_perceptual)?
        + (&parts.pixel * w.alpha_pixel)?
        + (&parts.adversarial * w.alpha_adv)?)?;
    let breakdown = LossBreakdown {
        adversarial,
        pixel,
        perceptual,
        total: weighted_total(adversarial, pixel, perceptual, w),
    };
    Ok((total, breakdown))
}

pub fn weighted_total(adversarial: f64, pixel: f64, perceptual: f64, w: &LossWeights) -> f64 {
    w.alpha_perceptual * perceptual + w.alpha_pixel * pixel + w.alpha_adv * adversarial
}

/// `lsgan_d ∓ weight·perceptual` depending on the configured sign convention.
pub fn discriminator_total(
    lsgan_d: &Tensor,
    perceptual: &Tensor,
    weight: f64,
    sign: DiscriminatorPerceptualSign,
) -> Result<Tensor> {
    let s = match sign {
        DiscriminatorPerceptualSign::MaximizeDiscrepancy => -1.0,
        DiscriminatorPerceptualSign::MinimizeDiscrepancy => 1.0,
    };
    Ok((lsgan_d + (perceptual * (s * weight))?)?)
}
