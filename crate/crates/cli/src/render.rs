use std::path::Path;

use anyhow::{Context, Result};
use edoc_core::bbox::Xywh;
use image::{GrayImage, Luma, Rgb, RgbImage};

/// 3×5 digit glyphs, one row per entry, most significant bit on the left.
const DIGITS: [[u8; 5]; 10] = [
    [0b111, 0b101, 0b101, 0b101, 0b111],
    [0b010, 0b110, 0b010, 0b010, 0b111],
    [0b111, 0b001, 0b111, 0b100, 0b111],
    [0b111, 0b001, 0b111, 0b001, 0b111],
    [0b101, 0b101, 0b111, 0b001, 0b001],
    [0b111, 0b100, 0b111, 0b001, 0b111],
    [0b111, 0b100, 0b111, 0b101, 0b111],
    [0b111, 0b001, 0b010, 0b010, 0b010],
    [0b111, 0b101, 0b111, 0b101, 0b111],
    [0b111, 0b101, 0b111, 0b001, 0b111],
];

/// Distinct saturated colour per category id, walking the hue circle by the
/// golden angle.
fn color(category: u32) -> [u8; 3] {
    let hue = (category as f64 * 137.507_764) % 360.0;
    let x = 1.0 - ((hue / 60.0) % 2.0 - 1.0).abs();
    let (r, g, b) = match (hue / 60.0) as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [r, g, b].map(|c| (c * 200.0) as u8)
}

/// Grey level for a category on single-channel output, kept away from white.
fn gray(category: u32) -> u8 {
    let [r, g, b] = color(category);
    ((r as u32 * 3 + g as u32 * 6 + b as u32) / 10) as u8
}

/// Pixel span `[lo, hi]` covered by a box edge pair, clipped to the image.
fn span(start: f64, len: f64, limit: u32) -> Option<(u32, u32)> {
    let lo = start.round().max(0.0);
    let hi = ((start + len).round() - 1.0).min(limit as f64 - 1.0);
    (hi >= lo).then_some((lo as u32, hi as u32))
}

fn outline_pixels(b: &Xywh, w: u32, h: u32) -> Vec<(u32, u32)> {
    let (Some((x0, x1)), Some((y0, y1))) = (span(b[0], b[2], w), span(b[1], b[3], h)) else {
        return Vec::new();
    };
    let mut px = Vec::new();
    for x in x0..=x1 {
        px.push((x, y0));
        px.push((x, y1));
    }
    for y in y0..=y1 {
        px.push((x0, y));
        px.push((x1, y));
    }
    px
}

/// Ink pixels of `id` in the 3×5 font, top-left at `(x, y)`.
fn label_pixels(id: u32, x: u32, y: u32) -> Vec<(u32, u32)> {
    let mut px = Vec::new();
    for (k, ch) in id.to_string().bytes().enumerate() {
        let glyph = DIGITS[(ch - b'0') as usize];
        for (row, bits) in glyph.iter().enumerate() {
            for col in 0..3 {
                if bits >> (2 - col) & 1 == 1 {
                    px.push((x + k as u32 * 4 + col, y + row as u32));
                }
            }
        }
    }
    px
}

/// Draws 1-pixel category-coloured outlines (and optional id labels just
/// inside the top-left corner) over an 8-bit page and writes it. PNG and PPM
/// outputs are RGB, anything else single-channel.
pub fn render(w: u32, h: u32, page: &[u8], boxes: &[(u32, Xywh)], labels: bool, out: &Path) -> Result<()> {
    let mut marks: Vec<(u32, u32, u32)> = Vec::new();
    for &(cat, b) in boxes {
        marks.extend(outline_pixels(&b, w, h).into_iter().map(|(x, y)| (x, y, cat)));
        if labels {
            if let (Some((x0, _)), Some((y0, _))) = (span(b[0], b[2], w), span(b[1], b[3], h)) {
                marks.extend(
                    label_pixels(cat, x0 + 2, y0 + 2)
                        .into_iter()
                        .filter(|&(x, y)| x < w && y < h)
                        .map(|(x, y)| (x, y, cat)),
                );
            }
        }
    }
    let ext = out
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    let save_err = || format!("cannot write {}", out.display());
    if ext == "png" || ext == "ppm" {
        let mut img = RgbImage::from_fn(w, h, |x, y| {
            let v = page[(y * w + x) as usize];
            Rgb([v, v, v])
        });
        for (x, y, cat) in marks {
            img.put_pixel(x, y, Rgb(color(cat)));
        }
        img.save(out).with_context(save_err)
    } else {
        let mut img = GrayImage::from_raw(w, h, page.to_vec()).context("page buffer size")?;
        for (x, y, cat) in marks {
            img.put_pixel(x, y, Luma([gray(cat)]));
        }
        edoc_core::dataset::write_gray(out, w, h, img.as_raw()).with_context(save_err)
    }
}
