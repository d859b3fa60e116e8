//! Image-quality metrics on `[0,1]` images and test-split evaluation reports.

use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::codec::{decode_height, ColorMap, HeightmapImage};
use crate::data::{batch_tensors, SamplePair};
use crate::discriminator::{build_discriminator, Discriminator};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::image::{tensor_to_images, RgbImage};
use crate::nn::layers::Mode;
use crate::nn::params::tensors_digest;
use crate::trainer::checkpoint::load_discriminator_tensors;

pub const DEFAULT_PSNR_CAP_DB: f64 = 100.0;

fn same_shape(a: &RgbImage, b: &RgbImage) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::shape(
            format!("{}x{}x3", a.height, a.width),
            format!("{}x{}x3", b.height, b.width),
        ));
    }
    Ok(())
}

pub fn mse(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    same_shape(a, b)?;
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    Ok(sum / a.data.len() as f64)
}

/// `10·log10(max²/mse)`, or `cap_db` for identical images (and never above it).
pub fn psnr(a: &RgbImage, b: &RgbImage, max_value: f64, cap_db: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(cap_db);
    }
    Ok((10.0 * (max_value * max_value / m).log10()).min(cap_db))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
        }
    }
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of a `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..n).map(|j| k[j] * plane[r * w + c + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..n).map(|i| k[i] * rows[(r + i) * ow + c]).sum();
        }
    }
    out
}

/// Mean SSIM over channels and all window positions fully inside the image.
pub fn ssim(a: &RgbImage, b: &RgbImage, cfg: &SsimConfig) -> Result<f64> {
    same_shape(a, b)?;
    let (h, w) = (a.height, a.width);
    if h < cfg.window || w < cfg.window {
        return Err(Error::Data(format!(
            "image {h}x{w} is smaller than the {0}x{0} SSIM window",
            cfg.window
        )));
    }
    let k = gaussian_window(cfg.window, cfg.sigma);
    let c1 = (cfg.k1 * cfg.data_range).powi(2);
    let c2 = (cfg.k2 * cfg.data_range).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..3 {
        let x: Vec<f64> = a.channel(ch).into_iter().map(f64::from).collect();
        let y: Vec<f64> = b.channel(ch).into_iter().map(f64::from).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mx = filter_valid(&x, h, w, &k);
        let my = filter_valid(&y, h, w, &k);
        let sxx = filter_valid(&xx, h, w, &k);
        let syy = filter_valid(&yy, h, w, &k);
        let sxy = filter_valid(&xy, h, w, &k);
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            total += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// A discriminator loaded from an explicit checkpoint and used only for
/// feature extraction. Its digest is recorded in reports.
pub struct FrozenDiscriminator {
    pub disc: Discriminator,
    pub path: PathBuf,
    pub digest: String,
}

impl FrozenDiscriminator {
    pub fn load(path: &Path) -> Result<Self> {
        let (cfg, tensors) = load_discriminator_tensors(path)?;
        let disc = build_discriminator(&cfg, 0, DType::F32)?;
        disc.store().load_tensors(&tensors)?;
        Ok(Self {
            disc,
            digest: tensors_digest(&tensors)?,
            path: path.to_path_buf(),
        })
    }

    /// Wraps an in-memory discriminator (tests, ablations that already hold one).
    pub fn from_discriminator(disc: Discriminator, label: &str) -> Result<Self> {
        let digest = disc.store().digest()?;
        Ok(Self {
            disc,
            path: PathBuf::from(label),
            digest,
        })
    }
}

/// Per-sample LPIPS between `y` and `y_hat` conditioned on `x` (all NCHW):
/// `Σ_taps ‖D_l(x,y) − D_l(x,ŷ)‖² / (w_l·h_l·d_l)`, with the discriminator in
/// eval mode.
pub fn lpips_batch(x: &Tensor, y: &Tensor, y_hat: &Tensor, d: &Discriminator) -> Result<Vec<f64>> {
    let a = d.taps(x, y, false)?;
    let b = d.taps(x, y_hat, false)?;
    let batch = x.dim(0)?;
    let mut out = vec![0.0f64; batch];
    for (ta, tb) in a.taps.iter().zip(&b.taps) {
        let diff = (&ta.features - &tb.features)?.to_dtype(DType::F64)?;
        let per = diff.sqr()?.flatten_from(1)?.sum(D::Minus1)?.to_vec1::<f64>()?;
        for (o, v) in out.iter_mut().zip(per) {
            *o += v / ta.volume() as f64;
        }
    }
    Ok(out)
}

/// LPIPS for a single image triple in `[0,1]` HWC form.
pub fn lpips(y: &RgbImage, y_hat: &RgbImage, x: &RgbImage, d: &Discriminator) -> Result<f64> {
    same_shape(y, y_hat)?;
    same_shape(x, y)?;
    let dt = d.dtype();
    let v = lpips_batch(&x.to_tensor(dt)?, &y.to_tensor(dt)?, &y_hat.to_tensor(dt)?, d)?;
    Ok(v[0])
}

/// Anything that maps a fundus batch `(B,3,S,S)` to a heightmap batch.
pub trait Predictor {
    fn predict(&self, x: &Tensor) -> Result<Tensor>;
}

impl Predictor for Generator {
    fn predict(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x, &mut Mode::Eval)?.final_output)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub ssim: f64,
    pub psnr: f64,
    pub mse: f64,
    pub lpips: f64,
    pub mae_um: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ssim: f64,
    pub psnr_db: f64,
    pub mse: f64,
    pub lpips: f64,
    pub mae_um: f64,
    pub n_samples: usize,
    pub lpips_checkpoint: String,
    pub lpips_digest: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_sample: Vec<SampleMetrics>,
}

impl MetricReport {
    pub fn from_samples(per_sample: Vec<SampleMetrics>, lpips_checkpoint: &str, lpips_digest: &str) -> Result<Self> {
        if per_sample.is_empty() {
            return Err(Error::Data("cannot aggregate an empty evaluation set".into()));
        }
        let n = per_sample.len() as f64;
        let mean = |f: fn(&SampleMetrics) -> f64| per_sample.iter().map(f).sum::<f64>() / n;
        Ok(Self {
            ssim: mean(|s| s.ssim),
            psnr_db: mean(|s| s.psnr),
            mse: mean(|s| s.mse),
            lpips: mean(|s| s.lpips),
            mae_um: mean(|s| s.mae_um),
            n_samples: per_sample.len(),
            lpips_checkpoint: lpips_checkpoint.to_string(),
            lpips_digest: lpips_digest.to_string(),
            per_sample,
        })
    }

    /// Aggregates and provenance only.
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let summary = Self {
            per_sample: Vec::new(),
            ..self.clone()
        };
        write_file(path, &serde_json::to_string_pretty(&summary)?)
    }

    /// Per-sample rows: `id,ssim,psnr,mse,lpips,mae_um`.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut w = csv::Writer::from_path(path)?;
        for s in &self.per_sample {
            w.serialize(s)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Rebuilds a report from its JSON summary and per-sample CSV.
    pub fn load(json: &Path, csv_path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(json).map_err(|e| Error::io(json, e))?;
        let mut report: Self = serde_json::from_str(&text)?;
        let mut r = csv::Reader::from_path(csv_path)?;
        report.per_sample = r.deserialize().collect::<std::result::Result<_, _>>()?;
        Ok(report)
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Mean absolute height difference in µm after decoding both images.
pub fn mae_um(pred: &RgbImage, target: &RgbImage, cmap: &ColorMap) -> Result<f64> {
    same_shape(pred, target)?;
    let p = decode_height(&HeightmapImage::new(pred.map(|v| v.clamp(0.0, 1.0)))?, cmap);
    let t = decode_height(&HeightmapImage::new(target.clone())?, cmap);
    Ok(p.values.iter().zip(&t.values).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.values.len() as f64)
}

/// Runs `model` over `test` in batches and scores every sample.
pub fn evaluate(
    model: &dyn Predictor,
    test: &[SamplePair],
    d: &FrozenDiscriminator,
    cmap: &ColorMap,
    batch_size: usize,
) -> Result<MetricReport> {
    if test.is_empty() {
        return Err(Error::Data("test split is empty".into()));
    }
    let ssim_cfg = SsimConfig::default();
    let mut rows = Vec::with_capacity(test.len());
    for chunk in test.chunks(batch_size.max(1)) {
        let refs: Vec<&SamplePair> = chunk.iter().collect();
        let (x, y) = batch_tensors(&refs, d.disc.dtype())?;
        let pred = model.predict(&x)?.clamp(0.0, 1.0)?;
        let lp = lpips_batch(&x, &pred, &y, &d.disc)?;
        let preds = tensor_to_images(&pred)?;
        for ((p, img), l) in refs.iter().zip(&preds).zip(lp) {
            let target = &p.target.pixels;
            rows.push(SampleMetrics {
                id: p.id.clone(),
                ssim: ssim(img, target, &ssim_cfg)?,
                psnr: psnr(img, target, 1.0, DEFAULT_PSNR_CAP_DB)?,
                mse: mse(img, target)?,
                lpips: l,
                mae_um: mae_um(img, target, cmap)?,
            });
        }
    }
    MetricReport::from_samples(rows, &d.path.display().to_string(), &d.digest)
}
