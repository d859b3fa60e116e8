//! Mapping between physical heights (µm) and color-encoded heightmap images.
//!
//! Heights are encoded by a piecewise-linear colormap and decoded by
//! nearest-neighbor search over a uniformly sampled lookup table, so colors
//! that a network places slightly off the colormap curve still decode.
//!
//! The default five-stop blue→cyan→green→yellow→red map approximates the
//! device colorbar; it is configuration, and a measured colorbar can be loaded
//! from JSON instead.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::RgbImage;

pub const DEFAULT_HEIGHT_MIN_UM: f64 = 0.0;
pub const DEFAULT_HEIGHT_MAX_UM: f64 = 500.0;
/// 256 intervals, so each of the five default stops falls exactly on a table entry.
pub const DEFAULT_RESOLUTION: usize = 257;

/// Per-pixel elevation in micrometers, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct HeightField {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub height_min: f64,
    pub height_max: f64,
}

impl HeightField {
    pub fn new(height: usize, width: usize, values: Vec<f64>, range: (f64, f64)) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape(
                format!("{} values", height * width),
                format!("{} values", values.len()),
            ));
        }
        let field = Self {
            height,
            width,
            values,
            height_min: range.0,
            height_max: range.1,
        };
        if let Some((i, &v)) = field
            .values
            .iter()
            .enumerate()
            .find(|(_, v)| !(range.0..=range.1).contains(*v))
        {
            return Err(Error::HeightOutOfRange {
                value: v,
                min: range.0,
                max: range.1,
                at: Some((i / width, i % width)),
            });
        }
        Ok(field)
    }

    pub fn constant(height: usize, width: usize, value: f64, range: (f64, f64)) -> Result<Self> {
        Self::new(height, width, vec![value; height * width], range)
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorStop {
    pub fraction: f64,
    pub rgb: [f64; 3],
}

/// JSON form: `{"stops": [[fraction, r, g, b], ...], "resolution": n, "height_min_um": a, "height_max_um": b}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorMapSpec {
    pub stops: Vec<[f64; 4]>,
    pub resolution: usize,
    pub height_min_um: f64,
    pub height_max_um: f64,
}

#[derive(Clone, Debug)]
pub struct ColorMap {
    stops: Vec<ColorStop>,
    resolution: usize,
    height_min: f64,
    height_max: f64,
    table: Vec<[f64; 3]>,
}

impl Default for ColorMap {
    fn default() -> Self {
        let stops = [
            (0.00, [0.0, 0.0, 1.0]),
            (0.25, [0.0, 1.0, 1.0]),
            (0.50, [0.0, 1.0, 0.0]),
            (0.75, [1.0, 1.0, 0.0]),
            (1.00, [1.0, 0.0, 0.0]),
        ]
        .into_iter()
        .map(|(fraction, rgb)| ColorStop { fraction, rgb })
        .collect();
        Self::new(
            stops,
            DEFAULT_RESOLUTION,
            (DEFAULT_HEIGHT_MIN_UM, DEFAULT_HEIGHT_MAX_UM),
        )
        .expect("default colormap is valid")
    }
}

impl ColorMap {
    pub fn new(stops: Vec<ColorStop>, resolution: usize, range: (f64, f64)) -> Result<Self> {
        if stops.len() < 2 {
            return Err(Error::Config("colormap needs at least two stops".into()));
        }
        if stops[0].fraction != 0.0 || stops[stops.len() - 1].fraction != 1.0 {
            return Err(Error::Config(
                "colormap stops must start at fraction 0 and end at 1".into(),
            ));
        }
        if stops.windows(2).any(|w| w[1].fraction <= w[0].fraction) {
            return Err(Error::Config(
                "colormap stop fractions must be strictly increasing".into(),
            ));
        }
        if stops
            .iter()
            .flat_map(|s| s.rgb)
            .any(|c| !(0.0..=1.0).contains(&c))
        {
            return Err(Error::Config("colormap colors must lie in [0,1]".into()));
        }
        if resolution < 2 {
            return Err(Error::Config("colormap resolution must be >= 2".into()));
        }
        if !(range.0 < range.1) {
            return Err(Error::Config(format!(
                "height range [{}, {}] is empty",
                range.0, range.1
            )));
        }
        let mut cmap = Self {
            stops,
            resolution,
            height_min: range.0,
            height_max: range.1,
            table: Vec::new(),
        };
        cmap.table = (0..resolution)
            .map(|i| cmap.at_fraction(i as f64 / (resolution - 1) as f64))
            .collect();
        for (i, w) in cmap.table.windows(2).enumerate() {
            if w[0] == w[1] {
                return Err(Error::Config(format!(
                    "lookup table entries {i} and {} share a color; decoding would be ambiguous",
                    i + 1
                )));
            }
        }
        let mut sorted = cmap.table.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite colors"));
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config(
                "lookup table contains duplicate colors; decoding would be ambiguous".into(),
            ));
        }
        Ok(cmap)
    }

    pub fn from_spec(spec: &ColorMapSpec) -> Result<Self> {
        let stops = spec
            .stops
            .iter()
            .map(|s| ColorStop {
                fraction: s[0],
                rgb: [s[1], s[2], s[3]],
            })
            .collect();
        Self::new(stops, spec.resolution, (spec.height_min_um, spec.height_max_um))
    }

    pub fn to_spec(&self) -> ColorMapSpec {
        ColorMapSpec {
            stops: self
                .stops
                .iter()
                .map(|s| [s.fraction, s.rgb[0], s.rgb[1], s.rgb[2]])
                .collect(),
            resolution: self.resolution,
            height_min_um: self.height_min,
            height_max_um: self.height_max,
        }
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: ColorMapSpec = serde_json::from_str(&text)?;
        Self::from_spec(&spec)
    }

    pub fn stops(&self) -> &[ColorStop] {
        &self.stops
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn range(&self) -> (f64, f64) {
        (self.height_min, self.height_max)
    }

    /// Height step between adjacent table entries; also the decode error bound.
    pub fn quantum(&self) -> f64 {
        (self.height_max - self.height_min) / (self.resolution - 1) as f64
    }

    pub fn table(&self) -> &[[f64; 3]] {
        &self.table
    }

    pub fn table_height(&self, index: usize) -> f64 {
        self.height_min + index as f64 * self.quantum()
    }

    fn at_fraction(&self, t: f64) -> [f64; 3] {
        let seg = self
            .stops
            .windows(2)
            .find(|w| t <= w[1].fraction)
            .unwrap_or(&self.stops[self.stops.len() - 2..]);
        let (a, b) = (seg[0], seg[1]);
        let u = ((t - a.fraction) / (b.fraction - a.fraction)).clamp(0.0, 1.0);
        [
            a.rgb[0] + u * (b.rgb[0] - a.rgb[0]),
            a.rgb[1] + u * (b.rgb[1] - a.rgb[1]),
            a.rgb[2] + u * (b.rgb[2] - a.rgb[2]),
        ]
    }

    /// Color of height `h` within this map's own range.
    pub fn lookup(&self, h: f64) -> Result<[f64; 3]> {
        colormap_lookup(h, self, (self.height_min, self.height_max))
    }

    /// Index of the nearest table color (squared Euclidean distance); ties go to the lower index.
    pub fn nearest_index(&self, rgb: [f64; 3]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, c) in self.table.iter().enumerate() {
            let d = (c[0] - rgb[0]).powi(2) + (c[1] - rgb[1]).powi(2) + (c[2] - rgb[2]).powi(2);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    pub fn decode_rgb(&self, rgb: [f64; 3]) -> f64 {
        self.table_height(self.nearest_index(rgb))
    }
}

/// Piecewise-linear color for height `h` at fraction `(h - min) / (max - min)`.
pub fn colormap_lookup(h: f64, cmap: &ColorMap, range: (f64, f64)) -> Result<[f64; 3]> {
    let (min, max) = range;
    if !(min..=max).contains(&h) || !(min < max) {
        return Err(Error::HeightOutOfRange {
            value: h,
            min,
            max,
            at: None,
        });
    }
    Ok(cmap.at_fraction((h - min) / (max - min)))
}

/// A color-encoded heightmap with channel values in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeightmapImage {
    pub pixels: RgbImage,
}

impl HeightmapImage {
    pub fn new(pixels: RgbImage) -> Result<Self> {
        if pixels.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data(
                "heightmap channel values must lie in [0,1]".into(),
            ));
        }
        Ok(Self { pixels })
    }

    pub fn height(&self) -> usize {
        self.pixels.height
    }

    pub fn width(&self) -> usize {
        self.pixels.width
    }
}

pub fn encode_height(field: &HeightField, cmap: &ColorMap) -> Result<HeightmapImage> {
    let range = (field.height_min, field.height_max);
    let mut pixels = RgbImage::zeros(field.height, field.width);
    for row in 0..field.height {
        for col in 0..field.width {
            let h = field.get(row, col);
            let rgb = colormap_lookup(h, cmap, range).map_err(|_| Error::HeightOutOfRange {
                value: h,
                min: range.0,
                max: range.1,
                at: Some((row, col)),
            })?;
            pixels.set(row, col, [rgb[0] as f32, rgb[1] as f32, rgb[2] as f32]);
        }
    }
    Ok(HeightmapImage { pixels })
}

pub fn decode_height(img: &HeightmapImage, cmap: &ColorMap) -> HeightField {
    let values = img
        .pixels
        .data
        .chunks_exact(3)
        .map(|p| cmap.decode_rgb([p[0] as f64, p[1] as f64, p[2] as f64]))
        .collect();
    HeightField {
        height: img.height(),
        width: img.width(),
        values,
        height_min: cmap.height_min,
        height_max: cmap.height_max,
    }
}
