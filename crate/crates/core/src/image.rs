//! Plain HWC RGB float images and their conversions to PNG files and NCHW tensors.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::imageops::FilterType;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    /// Row-major, interleaved RGB.
    pub data: Vec<f32>,
}

impl RgbImage {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, [0.0; 3])
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::shape(
                format!("{height}x{width}x3 = {} values", height * width * 3),
                data.len(),
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, rgb: [f32; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Mirror left-right.
    pub fn hflip(&self) -> Self {
        let mut out = self.clone();
        for r in 0..self.height {
            for c in 0..self.width {
                out.set(r, c, self.get(r, self.width - 1 - c));
            }
        }
        out
    }

    /// Mirror top-bottom.
    pub fn vflip(&self) -> Self {
        let mut out = self.clone();
        for r in 0..self.height {
            for c in 0..self.width {
                out.set(r, c, self.get(self.height - 1 - r, c));
            }
        }
        out
    }

    pub fn channel(&self, k: usize) -> Vec<f32> {
        self.data.iter().skip(k).step_by(3).copied().collect()
    }

    /// Bilinear resize, channel values preserved in their current domain.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Self {
        self.resize_with(height, width, FilterType::Triangle)
    }

    pub fn resize_nearest(&self, height: usize, width: usize) -> Self {
        self.resize_with(height, width, FilterType::Nearest)
    }

    fn resize_with(&self, height: usize, width: usize, filter: FilterType) -> Self {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let buf: image::ImageBuffer<image::Rgb<f32>, Vec<f32>> =
            image::ImageBuffer::from_raw(self.width as u32, self.height as u32, self.data.clone())
                .expect("buffer size matches dimensions");
        let out = image::imageops::resize(&buf, width as u32, height as u32, filter);
        Self {
            height,
            width,
            data: out.into_raw(),
        }
    }

    /// Reads an 8-bit RGB PNG; values stay in `[0,255]`.
    pub fn load_png_raw(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                source: e,
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        Ok(Self {
            height: h as usize,
            width: w as usize,
            data: img.into_raw().into_iter().map(f32::from).collect(),
        })
    }

    /// Writes values scaled by `scale` (255 for `[0,1]` images, 1 for raw), rounded and clamped.
    pub fn save_png(&self, path: &Path, scale: f32) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|&v| (v * scale).round().clamp(0.0, 255.0) as u8)
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer size matches dimensions")
            .save(path)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                source: e,
            })
    }

    /// Single-image NCHW tensor `(1, 3, H, W)`.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        images_to_tensor(std::slice::from_ref(self), dtype)
    }
}

/// Stacks equally sized images into an NCHW tensor `(B, 3, H, W)`.
pub fn images_to_tensor(images: &[RgbImage], dtype: DType) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Data("cannot build a batch from zero images".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data: Vec<f32> = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.height != h || img.width != w {
            return Err(Error::shape(
                format!("{h}x{w}"),
                format!("{}x{}", img.height, img.width),
            ));
        }
        for k in 0..3 {
            data.extend(img.data.iter().skip(k).step_by(3).copied());
        }
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Splits an NCHW tensor `(B, 3, H, W)` into images.
pub fn tensor_to_images(t: &Tensor) -> Result<Vec<RgbImage>> {
    let (b, c, h, w) = t.dims4()?;
    if c != 3 {
        return Err(Error::shape("3 channels", c));
    }
    let flat: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    let plane = h * w;
    Ok((0..b)
        .map(|n| {
            let base = n * 3 * plane;
            let mut data = Vec::with_capacity(3 * plane);
            for p in 0..plane {
                for k in 0..3 {
                    data.push(flat[base + k * plane + p]);
                }
            }
            RgbImage {
                height: h,
                width: w,
                data,
            }
        })
        .collect())
}

/// Places images left to right with a `gap`-pixel white separator.
pub fn hstack(images: &[&RgbImage], gap: usize) -> RgbImage {
    let h = images.iter().map(|i| i.height).max().unwrap_or(0);
    let w: usize = images.iter().map(|i| i.width).sum::<usize>() + gap * images.len().saturating_sub(1);
    let mut out = RgbImage::filled(h, w, [1.0; 3]);
    let mut x0 = 0;
    for img in images {
        for r in 0..img.height {
            for c in 0..img.width {
                out.set(r, x0 + c, img.get(r, c));
            }
        }
        x0 += img.width + gap;
    }
    out
}

pub fn vstack(images: &[RgbImage], gap: usize) -> RgbImage {
    let w = images.iter().map(|i| i.width).max().unwrap_or(0);
    let h: usize = images.iter().map(|i| i.height).sum::<usize>() + gap * images.len().saturating_sub(1);
    let mut out = RgbImage::filled(h, w, [1.0; 3]);
    let mut y0 = 0;
    for img in images {
        for r in 0..img.height {
            for c in 0..img.width {
                out.set(y0 + r, c, img.get(r, c));
            }
        }
        y0 += img.height + gap;
    }
    out
}
