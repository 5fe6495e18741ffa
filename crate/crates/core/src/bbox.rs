//! Axis-aligned boxes in `[x1, y1, w, h]` form with a top-left origin.

use crate::error::{Error, Result};

pub type Xywh = [f64; 4];

pub fn area(b: &Xywh) -> f64 {
    b[2] * b[3]
}

pub fn intersection(a: &Xywh, b: &Xywh) -> f64 {
    let w = (a[0] + a[2]).min(b[0] + b[2]) - a[0].max(b[0]);
    let h = (a[1] + a[3]).min(b[1] + b[3]) - a[1].max(b[1]);
    w.max(0.0) * h.max(0.0)
}

/// Intersection over union. Both boxes need positive width and height.
pub fn iou(a: &Xywh, b: &Xywh) -> Result<f64> {
    for bx in [a, b] {
        if !(bx[2] > 0.0 && bx[3] > 0.0) || bx.iter().any(|v| !v.is_finite()) {
            return Err(Error::Dimension(format!("degenerate box {bx:?}")));
        }
    }
    Ok(iou_unchecked(a, b))
}

/// [`iou`] without validation; 0 when the union is empty.
pub fn iou_unchecked(a: &Xywh, b: &Xywh) -> f64 {
    let inter = intersection(a, b);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Clips to `[0, width] × [0, height]`; `None` if nothing with positive area remains.
pub fn clip(b: &Xywh, width: f64, height: f64) -> Option<Xywh> {
    let x1 = b[0].clamp(0.0, width);
    let y1 = b[1].clamp(0.0, height);
    let x2 = (b[0] + b[2]).clamp(0.0, width);
    let y2 = (b[1] + b[3]).clamp(0.0, height);
    (x2 > x1 && y2 > y1).then(|| [x1, y1, x2 - x1, y2 - y1])
}
