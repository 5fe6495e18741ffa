//! Synthetic datasheet pages: non-overlapping rectangular regions on a white
//! page, each drawn with a texture specific to its category.

use std::f64::consts::TAU;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{category_id, Annotation, Dataset, PageRecord};
use crate::error::{Error, Result};
use crate::rng::{stream, SeededRng};

const TEXT: u32 = 16;
const TABLE: u32 = 17;
const TITLE: u32 = 18;
const LIST: u32 = 19;
const CAPTION: u32 = 20;

/// Which categories the generator samples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// text, title, table, list, caption, characteristic_curve_diagram.
    #[default]
    Desk,
    /// All 21 categories.
    Balanced,
}

impl Profile {
    /// Category ids in ascending order.
    pub fn categories(self) -> Vec<u32> {
        match self {
            Profile::Desk => {
                let mut ids: Vec<u32> = ["characteristic_curve_diagram", "text", "table", "title", "list", "caption"]
                    .iter()
                    .map(|n| category_id(n).expect("known category"))
                    .collect();
                ids.sort_unstable();
                ids
            }
            Profile::Balanced => (1..=21).collect(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Profile::Desk => "desk",
            Profile::Balanced => "balanced",
        }
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "balanced" => Ok(Profile::Balanced),
            other => Err(Error::Config(format!(
                "unknown profile {other:?} (expected \"desk\" or \"balanced\")"
            ))),
        }
    }
}

fn is_figure(cat: u32) -> bool {
    !matches!(cat, TEXT | TABLE | TITLE | LIST | CAPTION)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Rect {
    x: i64,
    y: i64,
    w: i64,
    h: i64,
}

impl Rect {
    fn overlaps_with_gap(&self, o: &Rect, gap: i64) -> bool {
        self.x < o.x + o.w + gap && o.x < self.x + self.w + gap && self.y < o.y + o.h + gap && o.y < self.y + self.h + gap
    }
}

struct Canvas {
    w: i64,
    h: i64,
    px: Vec<u8>,
}

/// Drawing confined to one region.
struct Pen<'a> {
    canvas: &'a mut Canvas,
    clip: Rect,
    /// Line thickness unit.
    t: i64,
}

impl Pen<'_> {
    fn fill_value(&mut self, x: i64, y: i64, w: i64, h: i64, v: u8) {
        let c = self.clip;
        let (x0, y0) = (x.max(c.x).max(0), y.max(c.y).max(0));
        let x1 = (x + w).min(c.x + c.w).min(self.canvas.w);
        let y1 = (y + h).min(c.y + c.h).min(self.canvas.h);
        for yy in y0..y1 {
            for xx in x0..x1 {
                self.canvas.px[(yy * self.canvas.w + xx) as usize] = v;
            }
        }
    }

    fn fill(&mut self, x: i64, y: i64, w: i64, h: i64) {
        self.fill_value(x, y, w, h, 0);
    }

    fn hline(&mut self, x0: i64, x1: i64, y: i64, thick: i64) {
        self.fill(x0.min(x1), y, (x1 - x0).abs() + 1, thick);
    }

    fn vline(&mut self, x: i64, y0: i64, y1: i64, thick: i64) {
        self.fill(x, y0.min(y1), thick, (y1 - y0).abs() + 1);
    }

    fn outline(&mut self, r: Rect, thick: i64) {
        self.fill(r.x, r.y, r.w, thick);
        self.fill(r.x, r.y + r.h - thick, r.w, thick);
        self.fill(r.x, r.y, thick, r.h);
        self.fill(r.x + r.w - thick, r.y, thick, r.h);
    }

    fn line(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, thick: i64) {
        let steps = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
        for s in 0..=steps {
            let x = x0 + (x1 - x0) * s / steps;
            let y = y0 + (y1 - y0) * s / steps;
            self.fill(x, y, thick, thick);
        }
    }
}

/// Size range `(w_lo, w_hi, h_lo, h_hi)` in unit-scale pixels.
fn size_range(cat: u32) -> (f64, f64, f64, f64) {
    match cat {
        TEXT => (40.0, 110.0, 14.0, 40.0),
        TITLE => (30.0, 70.0, 10.0, 14.0),
        TABLE => (40.0, 90.0, 24.0, 60.0),
        LIST => (30.0, 80.0, 16.0, 40.0),
        CAPTION => (20.0, 60.0, 4.0, 5.0),
        _ => (32.0, 72.0, 28.0, 64.0),
    }
}

/// Snaps row-based textures so the last row ends on the region's bottom edge.
fn snap_height(cat: u32, h: i64, t: i64) -> i64 {
    let pitch = match cat {
        TEXT => 5 * t,
        LIST => 6 * t,
        _ => return h,
    };
    let bar = if cat == TEXT { 2 * t } else { 3 * t };
    let rows = ((h - bar) / pitch + 1).max(1);
    (rows - 1) * pitch + bar
}

fn paint(pen: &mut Pen<'_>, cat: u32, rng: &mut SeededRng) {
    let r = pen.clip;
    let t = pen.t;
    let name = super::category_name(cat).unwrap_or("other");
    match name {
        "text" => {
            let mut y = r.y;
            while y + 2 * t <= r.y + r.h {
                let last = y + 7 * t > r.y + r.h;
                let end = if last {
                    r.x + (r.w as f64 * rng.gen_range(0.4..0.9)) as i64
                } else {
                    r.x + r.w
                };
                let mut x = r.x;
                while x < end {
                    let len = rng.gen_range(4 * t..=14 * t).min(end - x);
                    pen.fill(x, y, len, 2 * t);
                    x += len + rng.gen_range(2 * t..=3 * t);
                }
                y += 5 * t;
            }
        }
        "title" | "caption" => pen.fill(r.x, r.y, r.w, r.h),
        "table" => {
            pen.outline(r, t);
            let pitch = rng.gen_range(7 * t..=10 * t);
            let mut y = r.y + pitch;
            let mut first = true;
            while y < r.y + r.h - 3 * t {
                pen.hline(r.x, r.x + r.w - 1, y, if first { 2 * t } else { t });
                first = false;
                y += pitch;
            }
            let cols = rng.gen_range(2..=4);
            for c in 1..cols {
                let x = r.x + r.w * c / cols + rng.gen_range(-2 * t..=2 * t);
                pen.vline(x, r.y, r.y + r.h - 1, t);
            }
        }
        "list" => {
            let mut y = r.y;
            while y + 3 * t <= r.y + r.h {
                pen.fill(r.x, y, 3 * t, 3 * t);
                let len = ((r.w - 5 * t) as f64 * rng.gen_range(0.5..1.0)) as i64;
                pen.fill(r.x + 5 * t, y + t / 2, len.max(t), 2 * t);
                y += 6 * t;
            }
        }
        "characteristic_curve_diagram" => {
            pen.vline(r.x, r.y, r.y + r.h - 1, 2 * t);
            pen.hline(r.x, r.x + r.w - 1, r.y + r.h - 2 * t, 2 * t);
            let amp = (r.h as f64 / 2.0 - 4.0 * t as f64) * rng.gen_range(0.5..0.9);
            let cycles = rng.gen_range(0.7..2.0);
            let phase = rng.gen_range(0.0..TAU);
            let mid = r.y as f64 + r.h as f64 / 2.0 - t as f64;
            let x0 = r.x + 3 * t;
            let mut prev: Option<i64> = None;
            for x in x0..r.x + r.w - t {
                let u = (x - x0) as f64 / (r.w - 4 * t).max(1) as f64;
                let y = (mid + amp * (TAU * cycles * u + phase).sin()).round() as i64;
                let (lo, hi) = prev.map_or((y, y), |p| (p.min(y), p.max(y)));
                pen.fill(x, lo, t.max(2 * t - 1), hi - lo + 2 * t);
                prev = Some(y);
            }
        }
        "timing_diagram" => {
            let rows = rng.gen_range(2..=4).min((r.h / (6 * t)).max(1));
            let band = r.h / rows;
            for k in 0..rows {
                let top = r.y + k * band + t;
                let low = r.y + (k + 1) * band - 2 * t;
                let mut high = rng.gen_bool(0.5);
                let mut x = r.x;
                while x < r.x + r.w {
                    let len = rng.gen_range(4 * t..=10 * t);
                    let end = (x + len).min(r.x + r.w - 1);
                    pen.hline(x, end, if high { top } else { low }, t);
                    if end < r.x + r.w - 1 {
                        pen.vline(end, top, low, t);
                    }
                    high = !high;
                    x = end;
                    if end >= r.x + r.w - 1 {
                        break;
                    }
                }
            }
        }
        "functional_block_diagram" => {
            let n = rng.gen_range(2..=3);
            let bw = (r.w - (n - 1) * 4 * t) / n;
            let bh = r.h * 2 / 3;
            let by = r.y + (r.h - bh) / 2;
            for k in 0..n {
                let bx = r.x + k * (bw + 4 * t);
                pen.outline(Rect { x: bx, y: by, w: bw, h: bh }, t);
                if k + 1 < n {
                    pen.hline(bx + bw, bx + bw + 4 * t, by + bh / 2, t);
                }
            }
            pen.hline(r.x, r.x + r.w - 1, r.y, t);
            pen.hline(r.x, r.x + r.w - 1, r.y + r.h - t, t);
        }
        "flowchart" => {
            let n = rng.gen_range(2..=4).min((r.h / (6 * t)).max(1));
            let bh = (r.h - (n - 1) * 3 * t) / n;
            let bw = r.w * 2 / 3;
            let bx = r.x + (r.w - bw) / 2;
            for k in 0..n {
                let by = r.y + k * (bh + 3 * t);
                pen.outline(Rect { x: bx, y: by, w: bw, h: bh }, t);
                if k + 1 < n {
                    pen.vline(r.x + r.w / 2, by + bh, by + bh + 3 * t, t);
                }
            }
        }
        "circuit_diagram" => {
            let mid = r.y + r.h / 3;
            let zx0 = r.x + r.w / 3;
            let zx1 = r.x + 2 * r.w / 3;
            pen.hline(r.x, zx0, mid, t);
            pen.hline(zx1, r.x + r.w - 1, mid, t);
            let teeth = 6;
            for k in 0..teeth {
                let xa = zx0 + (zx1 - zx0) * k / teeth;
                let xb = zx0 + (zx1 - zx0) * (k + 1) / teeth;
                let (ya, yb) = if k % 2 == 0 { (mid, mid - 3 * t) } else { (mid - 3 * t, mid) };
                pen.line(xa, ya, xb, yb, t);
            }
            pen.vline(r.x + r.w - t, mid, r.y + r.h - 4 * t, t);
            for k in 0..3 {
                let half = r.w / 8 - k * 2 * t;
                let cx = r.x + r.w - r.w / 8;
                pen.hline(cx - half, cx + half, r.y + r.h - 4 * t + k * 2 * t, t);
            }
            pen.vline(r.x, r.y, r.y + r.h - 1, t);
        }
        "pin_diagram" | "pin_name_diagram" => {
            let body = if name == "pin_diagram" {
                Rect { x: r.x + r.w / 4, y: r.y, w: r.w / 2, h: r.h }
            } else {
                Rect { x: r.x + r.w / 2, y: r.y, w: r.w - r.w / 2, h: r.h }
            };
            pen.outline(body, t);
            let mut y = r.y + 3 * t;
            while y < r.y + r.h - 2 * t {
                if name == "pin_diagram" {
                    pen.hline(r.x, body.x, y, t);
                    pen.hline(body.x + body.w, r.x + r.w - 1, y, t);
                } else {
                    pen.hline(r.x + r.w / 4, body.x, y, t);
                    pen.fill(r.x, y - t / 2, r.w / 4 - t, 2 * t);
                    pen.fill(body.x + 2 * t, y - t / 2, body.w / 3, 2 * t);
                }
                y += 4 * t;
            }
        }
        "engineering_drawing" => {
            let inner = Rect {
                x: r.x + 4 * t,
                y: r.y,
                w: r.w - 8 * t,
                h: r.h - 5 * t,
            };
            pen.outline(inner, t);
            pen.line(inner.x, inner.y, inner.x + inner.w - 1, inner.y + inner.h - 1, t);
            pen.line(inner.x, inner.y + inner.h - 1, inner.x + inner.w - 1, inner.y, t);
            let dy = r.y + r.h - 2 * t;
            pen.hline(r.x, r.x + r.w - 1, dy, t);
            pen.vline(r.x, dy - 2 * t, r.y + r.h - 1, t);
            pen.vline(r.x + r.w - t, dy - 2 * t, r.y + r.h - 1, t);
        }
        "sampling_diagram" => {
            let base = r.y + r.h - t;
            pen.hline(r.x, r.x + r.w - 1, base, t);
            let phase = rng.gen_range(0.0..TAU);
            let mut x = r.x + t;
            while x + 2 * t < r.x + r.w {
                let u = (x - r.x) as f64 / r.w as f64;
                let height = ((0.55 + 0.4 * (TAU * u + phase).sin()) * (r.h - 4 * t) as f64) as i64;
                let top = base - height.max(2 * t);
                pen.vline(x + t / 2, top, base, t);
                pen.fill(x - t / 2, top - t, 3 * t, 3 * t);
                x += 5 * t;
            }
        }
        "three_d_schematic_diagram" => {
            let d = (r.w.min(r.h) / 4).max(2 * t);
            let front = Rect {
                x: r.x,
                y: r.y + d,
                w: r.w - d,
                h: r.h - d,
            };
            let back = Rect {
                x: r.x + d,
                y: r.y,
                w: r.w - d,
                h: r.h - d,
            };
            pen.outline(front, t);
            pen.outline(back, t);
            for (ax, ay) in [(0, 0), (front.w - t, 0), (0, front.h - t), (front.w - t, front.h - t)] {
                pen.line(front.x + ax, front.y + ay, back.x + ax, back.y + ay, t);
            }
        }
        "marking_diagram" => {
            pen.outline(r, 2 * t);
            let rows = rng.gen_range(2..=3);
            for k in 0..rows {
                let len = (r.w as f64 * rng.gen_range(0.3..0.6)) as i64;
                let y = r.y + r.h * (k + 1) / (rows + 1) - t;
                pen.fill(r.x + (r.w - len) / 2, y, len, 2 * t);
            }
        }
        "appearance_diagram" => {
            pen.fill_value(r.x, r.y, r.w, r.h, 110);
            pen.outline(r, t);
            pen.fill(r.x + r.w / 3, r.y + r.h / 3, r.w / 3, r.h / 3);
        }
        "functional_register_diagram" => {
            let label_h = r.h / 3;
            let cells = 8;
            for k in 0..cells {
                let x0 = r.x + r.w * k / cells;
                let x1 = r.x + r.w * (k + 1) / cells;
                pen.outline(
                    Rect {
                        x: x0,
                        y: r.y + label_h,
                        w: x1 - x0 + t,
                        h: r.h - label_h,
                    },
                    t,
                );
                pen.fill(x0 + t, r.y + label_h / 3, (x1 - x0) / 2, 2 * t);
            }
        }
        "layout_diagram" => {
            let mut y = r.y;
            while y + 3 * t <= r.y + r.h {
                let mut x = r.x;
                while x + 3 * t <= r.x + r.w {
                    pen.fill(x, y, 3 * t, 3 * t);
                    x += 6 * t;
                }
                y += 6 * t;
            }
        }
        "data_structure_diagram" => {
            let mut k = 0;
            loop {
                let inset = k * 4 * t;
                let rr = Rect {
                    x: r.x + inset,
                    y: r.y + inset,
                    w: r.w - 2 * inset,
                    h: r.h - 2 * inset,
                };
                if rr.w < 3 * t || rr.h < 3 * t {
                    break;
                }
                pen.outline(rr, t);
                k += 1;
            }
        }
        _ => {
            let mut off = 0;
            while off < r.w + r.h {
                pen.line(r.x + off, r.y, r.x + off - r.h, r.y + r.h, t);
                off += 5 * t;
            }
            pen.outline(r, t);
        }
    }
}

/// One synthetic page. Pure function of its arguments; pages must be at
/// least 128×128.
pub fn synth_page(seed: u64, width: u32, height: u32, profile: Profile) -> Result<PageRecord> {
    if width < 128 || height < 128 {
        return Err(Error::Config(format!(
            "synthetic pages must be at least 128×128, got {width}×{height}"
        )));
    }
    let (pw, ph) = (width as i64, height as i64);
    let unit = (width.min(height) as f64 / 128.0).max(1.0);
    let t = unit.round() as i64;
    let margin = (4.0 * unit) as i64;
    let gap = 3 * t;
    let mut rng = stream(seed, "synth-page");
    let cats = profile.categories();
    let standalone: Vec<u32> = cats.iter().copied().filter(|&c| c != CAPTION).collect();
    let has_caption = cats.contains(&CAPTION);

    let mut regions: Vec<(u32, Rect)> = Vec::new();
    while regions.len() < 2 {
        regions.clear();
        let target = rng.gen_range(2..=8usize);
        let mut attempts = 0;
        while regions.len() < target && attempts < 80 * target {
            attempts += 1;
            let cat = standalone[rng.gen_range(0..standalone.len())];
            let (wl, wh, hl, hh) = size_range(cat);
            let w = ((rng.gen_range(wl..=wh) * unit) as i64).min(pw - 2 * margin);
            let h = ((rng.gen_range(hl..=hh) * unit) as i64).min(ph - 2 * margin);
            let h = snap_height(cat, h, t);
            let x = rng.gen_range(margin..=pw - margin - w);
            let y = rng.gen_range(margin..=ph - margin - h);
            let rect = Rect { x, y, w, h };
            if regions.iter().any(|(_, o)| o.overlaps_with_gap(&rect, gap)) {
                continue;
            }
            regions.push((cat, rect));
            if has_caption && is_figure(cat) && regions.len() < target && rng.gen_bool(0.7) {
                let (_, _, hl, hh) = size_range(CAPTION);
                let ch = (rng.gen_range(hl..=hh) * unit).round() as i64;
                let cw = ((rect.w as f64 * rng.gen_range(0.6..1.0)) as i64).max(4 * t);
                let cap = Rect {
                    x: rect.x + rng.gen_range(0..=rect.w - cw),
                    y: rect.y + rect.h + 2 * t,
                    w: cw,
                    h: ch,
                };
                let fits = cap.y + cap.h <= ph - margin
                    && !regions[..regions.len() - 1]
                        .iter()
                        .any(|(_, o)| o.overlaps_with_gap(&cap, gap));
                if fits {
                    regions.push((CAPTION, cap));
                }
            }
        }
    }

    let mut canvas = Canvas {
        w: pw,
        h: ph,
        px: vec![255; (pw * ph) as usize],
    };
    let mut annotations = Vec::with_capacity(regions.len());
    for (cat, rect) in &regions {
        let mut pen = Pen {
            canvas: &mut canvas,
            clip: *rect,
            t,
        };
        paint(&mut pen, *cat, &mut rng);
        annotations.push(Annotation {
            category_id: *cat,
            bbox: [rect.x as f64, rect.y as f64, rect.w as f64, rect.h as f64],
        });
    }
    Ok(PageRecord {
        id: 0,
        file_name: String::new(),
        width,
        height,
        pixels: Some(canvas.px),
        annotations,
    })
}

/// `n` pages with ids `1..=n` and file names `page_00001.pgm`, …; page `i`
/// uses its own seed derived from `seed` and `i`.
pub fn synth_dataset(n: usize, seed: u64, width: u32, height: u32, profile: Profile) -> Result<Dataset> {
    let mut pages = Vec::with_capacity(n);
    for i in 0..n {
        let page_seed = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64);
        let mut page = synth_page(page_seed, width, height, profile)?;
        page.id = i as u64 + 1;
        page.file_name = format!("page_{:05}.pgm", i + 1);
        pages.push(page);
    }
    Ok(Dataset::new(pages, ""))
}
