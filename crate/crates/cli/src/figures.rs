//! Minimal raster bar charts: one bar per sweep point, value printed above
//! each bar and the point's 1-based index below it.

use std::path::Path;

use fundus_height::image::RgbImage;

const WIDTH: usize = 360;
const HEIGHT: usize = 240;
const MARGIN: usize = 28;
const SCALE: usize = 2;
const BAR_RGB: [f32; 3] = [0.22, 0.42, 0.69];
const INK: [f32; 3] = [0.0, 0.0, 0.0];

/// 3×5 glyphs, one row per `u8` (low three bits, MSB on the left).
fn glyph(c: char) -> Option<[u8; 5]> {
    Some(match c {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 1, 1],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        '.' => [0, 0, 0, 0, 2],
        '-' => [0, 0, 7, 0, 0],
        '+' => [0, 2, 7, 2, 0],
        'e' => [0, 7, 7, 4, 7],
        _ => return None,
    })
}

fn fill(img: &mut RgbImage, x0: usize, y0: usize, w: usize, h: usize, rgb: [f32; 3]) {
    for r in y0..(y0 + h).min(img.height) {
        for c in x0..(x0 + w).min(img.width) {
            img.set(r, c, rgb);
        }
    }
}

fn text_width(s: &str) -> usize {
    s.chars().count() * 4 * SCALE
}

fn draw_text(img: &mut RgbImage, x0: usize, y0: usize, s: &str) {
    for (i, ch) in s.chars().enumerate() {
        let Some(rows) = glyph(ch) else { continue };
        for (r, bits) in rows.iter().enumerate() {
            for c in 0..3 {
                if bits >> (2 - c) & 1 == 1 {
                    fill(img, x0 + (i * 4 + c) * SCALE, y0 + r * SCALE, SCALE, SCALE, INK);
                }
            }
        }
    }
}

fn label(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

/// Renders `values` (one per sweep point, in table order) as a bar chart.
/// Negative values are drawn as empty bars.
pub fn bar_chart(values: &[f64], path: &Path) -> fundus_height::Result<()> {
    let mut img = RgbImage::filled(HEIGHT, WIDTH, [1.0; 3]);
    let base_y = HEIGHT - MARGIN;
    let top = MARGIN;
    fill(&mut img, MARGIN, top, 1, base_y - top + 1, INK);
    fill(&mut img, MARGIN, base_y, WIDTH - 2 * MARGIN, 1, INK);
    let vmax = values.iter().copied().filter(|v| v.is_finite()).fold(0.0f64, f64::max);
    let n = values.len().max(1);
    let slot = (WIDTH - 2 * MARGIN) / n;
    let bar_w = (slot * 3 / 5).max(1);
    for (i, &v) in values.iter().enumerate() {
        let x = MARGIN + i * slot + (slot - bar_w) / 2;
        let frac = if vmax > 0.0 && v.is_finite() { (v / vmax).clamp(0.0, 1.0) } else { 0.0 };
        let h = (frac * (base_y - top - 7 * SCALE) as f64).round() as usize;
        fill(&mut img, x, base_y - h, bar_w, h, BAR_RGB);
        let text = label(v);
        let tx = (x + bar_w / 2).saturating_sub(text_width(&text) / 2);
        draw_text(&mut img, tx, base_y - h - 6 * SCALE, &text);
        let idx = (i + 1).to_string();
        draw_text(&mut img, (x + bar_w / 2).saturating_sub(text_width(&idx) / 2), base_y + 3 * SCALE, &idx);
    }
    img.save_png(path, 255.0)
}
