//! Synthetic fundus/heightmap pairs for desk-scale runs.
//!
//! The height field is a clipped sum of Gaussian bumps; the pseudo-fundus is an
//! orange base shaded by the field's surface normals with a few dark Bézier
//! "vessels" on top. Sample `i` draws only from an RNG keyed by `(seed, i)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{FundusImage, SamplePair};
use crate::codec::{encode_height, ColorMap, HeightField};
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::nn::params::named_rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Inclusive range for the number of bumps.
    pub bumps: (usize, usize),
    /// Inclusive range for the number of vessels.
    pub vessels: (usize, usize),
    /// Bump standard deviation as a fraction of the image side.
    pub bump_sigma: (f64, f64),
    /// Micrometers per pixel used when shading, so slopes are visible.
    pub um_per_pixel: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            bumps: (1, 4),
            vessels: (2, 5),
            bump_sigma: (0.08, 0.3),
            um_per_pixel: 12.0,
        }
    }
}

const BASE_RGB: [f64; 3] = [205.0, 105.0, 45.0];
const VESSEL_RGB: [f64; 3] = [110.0, 30.0, 20.0];

pub fn synth_generate(n: usize, seed: u64, size: (usize, usize)) -> Result<Vec<SamplePair>> {
    synth_generate_with(n, seed, size, &SynthConfig::default(), &ColorMap::default())
}

pub fn synth_generate_with(
    n: usize,
    seed: u64,
    size: (usize, usize),
    cfg: &SynthConfig,
    cmap: &ColorMap,
) -> Result<Vec<SamplePair>> {
    if n == 0 {
        return Err(Error::Config("synthetic corpus size must be at least 1".into()));
    }
    if size.0 < 2 || size.1 < 2 {
        return Err(Error::Config(format!("synthetic image size {size:?} is too small")));
    }
    if cfg.bumps.0 > cfg.bumps.1 || cfg.vessels.0 > cfg.vessels.1 {
        return Err(Error::Config("synthetic count ranges must be ordered".into()));
    }
    (0..n)
        .map(|i| {
            let id = format!("synth{i:05}");
            let mut rng = named_rng(seed, &id);
            let field = height_field(&mut rng, size, cfg, cmap.range())?;
            let fundus = render_fundus(&mut rng, &field, cfg);
            let target = encode_height(&field, cmap)?;
            SamplePair::new(id, FundusImage::raw(fundus)?, target)
        })
        .collect()
}

fn height_field(rng: &mut impl Rng, (h, w): (usize, usize), cfg: &SynthConfig, range: (f64, f64)) -> Result<HeightField> {
    let k = rng.random_range(cfg.bumps.0..=cfg.bumps.1);
    let side = h.min(w) as f64;
    let bumps: Vec<(f64, f64, f64, f64)> = (0..k)
        .map(|_| {
            let cy = rng.random_range(0.0..h as f64);
            let cx = rng.random_range(0.0..w as f64);
            let sigma = side * rng.random_range(cfg.bump_sigma.0..=cfg.bump_sigma.1);
            let amp = rng.random_range(range.0..=range.1);
            (cy, cx, sigma, amp)
        })
        .collect();
    let mut values = vec![range.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut v = range.0;
            for &(cy, cx, s, a) in &bumps {
                let d2 = (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2);
                v += a * (-d2 / (2.0 * s * s)).exp();
            }
            values[r * w + c] = v.clamp(range.0, range.1);
        }
    }
    HeightField::new(h, w, values, range)
}

fn render_fundus(rng: &mut impl Rng, field: &HeightField, cfg: &SynthConfig) -> RgbImage {
    let (h, w) = (field.height, field.width);
    let light = {
        let l = [-0.4f64, -0.5, 0.75];
        let n = (l[0] * l[0] + l[1] * l[1] + l[2] * l[2]).sqrt();
        [l[0] / n, l[1] / n, l[2] / n]
    };
    let z = |r: isize, c: isize| {
        let r = r.clamp(0, h as isize - 1) as usize;
        let c = c.clamp(0, w as isize - 1) as usize;
        field.get(r, c) / cfg.um_per_pixel
    };

    // Vessel mask: union of discs along each cubic Bézier curve.
    let mut mask = vec![0f64; h * w];
    let n_vessels = rng.random_range(cfg.vessels.0..=cfg.vessels.1);
    for _ in 0..n_vessels {
        let pts: Vec<(f64, f64)> = (0..4)
            .map(|_| (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64)))
            .collect();
        let radius = rng.random_range(0.6..1.8);
        let steps = 4 * (h + w);
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let u = 1.0 - t;
            let b = [u * u * u, 3.0 * u * u * t, 3.0 * u * t * t, t * t * t];
            let py: f64 = (0..4).map(|j| b[j] * pts[j].0).sum();
            let px: f64 = (0..4).map(|j| b[j] * pts[j].1).sum();
            let r0 = (py - radius).floor().max(0.0) as usize;
            let r1 = ((py + radius).ceil() as usize).min(h - 1);
            let c0 = (px - radius).floor().max(0.0) as usize;
            let c1 = ((px + radius).ceil() as usize).min(w - 1);
            for r in r0..=r1 {
                for c in c0..=c1 {
                    let d = ((r as f64 - py).powi(2) + (c as f64 - px).powi(2)).sqrt();
                    let cover = (radius + 0.5 - d).clamp(0.0, 1.0);
                    let m = &mut mask[r * w + c];
                    *m = m.max(cover);
                }
            }
        }
    }

    let mut img = RgbImage::zeros(h, w);
    for r in 0..h {
        for c in 0..w {
            let (ri, ci) = (r as isize, c as isize);
            let gy = (z(ri + 1, ci) - z(ri - 1, ci)) / 2.0;
            let gx = (z(ri, ci + 1) - z(ri, ci - 1)) / 2.0;
            let norm = (gx * gx + gy * gy + 1.0).sqrt();
            let shade = ((-gy * light[0] - gx * light[1] + light[2]) / norm).max(0.0);
            let lum = 0.35 + 0.65 * shade;
            let m = mask[r * w + c];
            let mut px = [0f32; 3];
            for k in 0..3 {
                let v = BASE_RGB[k] * lum * (1.0 - m) + VESSEL_RGB[k] * lum * m;
                px[k] = v.round().clamp(0.0, 255.0) as f32;
            }
            img.set(r, c, px);
        }
    }
    img
}
