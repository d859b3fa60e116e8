//! Contrast-limited adaptive histogram equalization on 8-bit-valued channels.
//!
//! Each tile gets a clipped 256-bin histogram whose excess is redistributed
//! uniformly; the tile mapping is `round(255 · cdf(v) / area)`. Pixels blend
//! the mappings of the four nearest tile centers bilinearly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::RgbImage;

const BINS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClaheColorMode {
    /// Equalize R, G and B independently.
    PerChannel,
    /// Equalize luma (BT.601) and keep chroma.
    Luminance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClaheConfig {
    /// Multiple of the mean bin count at which histograms are clipped; `inf` disables clipping.
    pub clip_limit: f64,
    /// (rows, cols) of tiles.
    pub tile_grid: (usize, usize),
    pub color_mode: ClaheColorMode,
}

impl Default for ClaheConfig {
    fn default() -> Self {
        Self {
            clip_limit: 2.0,
            tile_grid: (8, 8),
            color_mode: ClaheColorMode::PerChannel,
        }
    }
}

fn bin(v: f32) -> usize {
    v.round().clamp(0.0, 255.0) as usize
}

/// Equalizes one channel given as `height × width` values in `[0,255]`.
pub fn clahe_channel(
    values: &[f32],
    height: usize,
    width: usize,
    clip_limit: f64,
    tile_grid: (usize, usize),
) -> Result<Vec<f32>> {
    let (ty, tx) = tile_grid;
    if ty == 0 || tx == 0 || ty > height || tx > width {
        return Err(Error::Config(format!(
            "tile grid {ty}x{tx} does not fit a {height}x{width} image"
        )));
    }
    if clip_limit.is_nan() || clip_limit <= 0.0 {
        return Err(Error::Config(format!("clip limit must be positive, got {clip_limit}")));
    }
    // tile i spans rows [i*height/ty, (i+1)*height/ty)
    let bounds = |n: usize, parts: usize| -> Vec<(usize, usize)> {
        (0..parts).map(|i| (i * n / parts, (i + 1) * n / parts)).collect()
    };
    let rows = bounds(height, ty);
    let cols = bounds(width, tx);

    let mut luts = vec![[0f32; BINS]; ty * tx];
    for (i, &(r0, r1)) in rows.iter().enumerate() {
        for (j, &(c0, c1)) in cols.iter().enumerate() {
            let mut hist = [0f64; BINS];
            for r in r0..r1 {
                for c in c0..c1 {
                    hist[bin(values[r * width + c])] += 1.0;
                }
            }
            let area = ((r1 - r0) * (c1 - c0)) as f64;
            if clip_limit.is_finite() {
                let limit = (clip_limit * area / BINS as f64).max(1.0);
                let mut excess = 0.0;
                for h in hist.iter_mut() {
                    if *h > limit {
                        excess += *h - limit;
                        *h = limit;
                    }
                }
                let share = excess / BINS as f64;
                for h in hist.iter_mut() {
                    *h += share;
                }
            }
            let lut = &mut luts[i * tx + j];
            let mut cdf = 0.0;
            for (v, h) in hist.iter().enumerate() {
                cdf += h;
                lut[v] = (255.0 * cdf / area).round().clamp(0.0, 255.0) as f32;
            }
        }
    }

    // Tile centers in pixel coordinates.
    let centers = |b: &[(usize, usize)]| -> Vec<f64> {
        b.iter().map(|&(a, e)| (a + e) as f64 / 2.0 - 0.5).collect()
    };
    let cy = centers(&rows);
    let cx = centers(&cols);
    let locate = |p: f64, centers: &[f64]| -> (usize, usize, f64) {
        if p <= centers[0] {
            return (0, 0, 0.0);
        }
        let last = centers.len() - 1;
        if p >= centers[last] {
            return (last, last, 0.0);
        }
        let k = centers.iter().rposition(|&c| c <= p).expect("p above first center");
        let t = (p - centers[k]) / (centers[k + 1] - centers[k]);
        (k, k + 1, t)
    };

    let mut out = vec![0f32; height * width];
    for r in 0..height {
        let (i0, i1, ay) = locate(r as f64, &cy);
        for c in 0..width {
            let (j0, j1, ax) = locate(c as f64, &cx);
            let v = bin(values[r * width + c]);
            let m = |i: usize, j: usize| luts[i * tx + j][v] as f64;
            let top = m(i0, j0) * (1.0 - ax) + m(i0, j1) * ax;
            let bottom = m(i1, j0) * (1.0 - ax) + m(i1, j1) * ax;
            out[r * width + c] = (top * (1.0 - ay) + bottom * ay).round().clamp(0.0, 255.0) as f32;
        }
    }
    Ok(out)
}

/// Applies CLAHE to a raw `[0,255]` RGB image according to `cfg.color_mode`.
pub fn clahe_rgb(img: &RgbImage, cfg: &ClaheConfig) -> Result<RgbImage> {
    let (h, w) = (img.height, img.width);
    match cfg.color_mode {
        ClaheColorMode::PerChannel => {
            let mut out = img.clone();
            for k in 0..3 {
                let eq = clahe_channel(&img.channel(k), h, w, cfg.clip_limit, cfg.tile_grid)?;
                for (p, v) in eq.into_iter().enumerate() {
                    out.data[p * 3 + k] = v;
                }
            }
            Ok(out)
        }
        ClaheColorMode::Luminance => {
            let ycc: Vec<[f32; 3]> = img.data.chunks_exact(3).map(|p| rgb_to_ycbcr([p[0], p[1], p[2]])).collect();
            let luma: Vec<f32> = ycc.iter().map(|p| p[0]).collect();
            let eq = clahe_channel(&luma, h, w, cfg.clip_limit, cfg.tile_grid)?;
            let mut out = img.clone();
            for (p, (y, c)) in eq.into_iter().zip(&ycc).enumerate() {
                let rgb = ycbcr_to_rgb([y, c[1], c[2]]);
                out.data[p * 3..p * 3 + 3].copy_from_slice(&rgb.map(|v| v.round().clamp(0.0, 255.0)));
            }
            Ok(out)
        }
    }
}

fn rgb_to_ycbcr([r, g, b]: [f32; 3]) -> [f32; 3] {
    let y = 0.299 * r + 0.587 * g + 0.114 * b;
    [y, 128.0 + 0.564 * (b - y), 128.0 + 0.713 * (r - y)]
}

fn ycbcr_to_rgb([y, cb, cr]: [f32; 3]) -> [f32; 3] {
    let r = y + 1.403 * (cr - 128.0);
    let b = y + 1.773 * (cb - 128.0);
    let g = (y - 0.299 * r - 0.114 * b) / 0.587;
    [r, g, b]
}
