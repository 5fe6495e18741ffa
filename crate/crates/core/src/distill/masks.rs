//! Foreground/background and scale masks over a neck grid.
//!
//! Boxes here are in neck-cell coordinates. A cell `(i, j)` belongs to a box
//! when its centre `(j + 0.5, i + 0.5)` lies in `[x1, x1 + w) × [y1, y1 + h)`.
//! Along an axis where a box covers no centre, it claims the cell containing
//! its own centre instead.

use std::ops::Range;

use crate::bbox::{clip, Xywh};
use crate::tensor::{Scalar, Tensor};

/// Row and column ranges of cells claimed by `bx` on an `h×w` grid.
pub fn claimed_cells(bx: &Xywh, h: usize, w: usize) -> (Range<usize>, Range<usize>) {
    let axis = |start: f64, len: f64, n: usize| {
        let lo = (start - 0.5).ceil().clamp(0.0, n as f64) as usize;
        let hi = (start + len - 0.5).ceil().clamp(0.0, n as f64) as usize;
        if lo < hi {
            lo..hi
        } else {
            let c = ((start + len / 2.0).floor().max(0.0) as usize).min(n - 1);
            c..c + 1
        }
    };
    (axis(bx[1], bx[3], h), axis(bx[0], bx[2], w))
}

/// Maps pixel boxes to cell coordinates of a grid with the given stride,
/// clipping to the grid. Boxes with no area inside the grid are dropped.
pub fn boxes_to_cells(boxes: &[Xywh], stride: usize, h: usize, w: usize) -> Vec<Xywh> {
    let s = stride as f64;
    boxes
        .iter()
        .filter_map(|b| clip(&[b[0] / s, b[1] / s, b[2] / s, b[3] / s], w as f64, h as f64))
        .collect()
}

/// `M[i, j] = 1` iff the cell belongs to any box.
pub fn binary_mask<T: Scalar>(boxes: &[Xywh], h: usize, w: usize) -> Tensor<T> {
    let mut m = Tensor::zeros([h, w]);
    for bx in boxes {
        let (rows, cols) = claimed_cells(bx, h, w);
        for i in rows {
            for j in cols.clone() {
                m.data_mut()[i * w + j] = T::one();
            }
        }
    }
    m
}

/// Foreground cells get `1/(H_r·W_r)` of the smallest claiming box (sizes in
/// claimed cells); background cells get `1/N_bg`.
pub fn scale_mask<T: Scalar>(boxes: &[Xywh], h: usize, w: usize) -> Tensor<T> {
    let mut smallest = vec![usize::MAX; h * w];
    for bx in boxes {
        let (rows, cols) = claimed_cells(bx, h, w);
        let cells = rows.len() * cols.len();
        for i in rows {
            for j in cols.clone() {
                let s = &mut smallest[i * w + j];
                *s = (*s).min(cells);
            }
        }
    }
    let n_bg = smallest.iter().filter(|&&c| c == usize::MAX).count();
    let data = smallest
        .into_iter()
        .map(|c| {
            if c == usize::MAX {
                T::one() / T::of(n_bg as f64)
            } else {
                T::one() / T::of(c as f64)
            }
        })
        .collect();
    Tensor::new([h, w], data).expect("h·w values")
}
