//! Dense single-scale head: one box per neck cell.
//!
//! Channel layout per cell: `[objectness, class_1..class_K, dx, dy, log w, log h]`.
//! Box centers are `(cell + 0.5 + d) · stride` and sizes `exp(t) · stride`.

use serde::{Deserialize, Serialize};

use crate::bbox::{area, clip, iou_unchecked, Xywh};
use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: Xywh,
    pub category_id: u32,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeParams {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_dets: usize,
}

impl Default for DecodeParams {
    fn default() -> Self {
        DecodeParams {
            score_threshold: 0.05,
            nms_iou: 0.5,
            max_dets: 100,
        }
    }
}

/// Decodes `N×(1+K+4)×Hn×Wn` head output into per-image detections in input
/// pixel coordinates, clipped to `image_w × image_h`. Keeps `score > threshold`.
pub fn decode_detections<T: Scalar>(
    head_raw: &Tensor<T>,
    stride: usize,
    params: DecodeParams,
) -> Result<Vec<Vec<Detection>>> {
    let shape = head_raw.shape();
    if shape.len() != 4 || shape[1] < 6 {
        return Err(Error::Dimension(format!("head output shape {shape:?}")));
    }
    for t in [params.score_threshold, params.nms_iou] {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Config(format!("threshold {t} outside [0, 1]")));
        }
    }
    let (n, ch, hn, wn) = (shape[0], shape[1], shape[2], shape[3]);
    let k = ch - 5;
    let plane = hn * wn;
    let s = stride as f64;
    let (img_w, img_h) = ((wn * stride) as f64, (hn * stride) as f64);
    let data = head_raw.data();
    let mut out = Vec::with_capacity(n);
    for b in 0..n {
        let at = |c: usize, cell: usize| data[(b * ch + c) * plane + cell].as_f64();
        let mut cands = Vec::new();
        for i in 0..hn {
            for j in 0..wn {
                let cell = i * wn + j;
                let obj = sigmoid(at(0, cell));
                let logits: Vec<f64> = (0..k).map(|c| at(1 + c, cell)).collect();
                let (best, &max_logit) = logits
                    .iter()
                    .enumerate()
                    .fold((0, &f64::NEG_INFINITY), |acc, (c, v)| if *v > *acc.1 { (c, v) } else { acc });
                let denom: f64 = logits.iter().map(|&v| (v - max_logit).exp()).sum();
                let score = obj / denom;
                if !(score > params.score_threshold) {
                    continue;
                }
                let cx = (j as f64 + 0.5 + at(1 + k, cell)) * s;
                let cy = (i as f64 + 0.5 + at(2 + k, cell)) * s;
                let w = at(3 + k, cell).clamp(-10.0, 10.0).exp() * s;
                let h = at(4 + k, cell).clamp(-10.0, 10.0).exp() * s;
                if let Some(bbox) = clip(&[cx - w / 2.0, cy - h / 2.0, w, h], img_w, img_h) {
                    cands.push(Detection {
                        bbox,
                        category_id: best as u32 + 1,
                        score,
                    });
                }
            }
        }
        out.push(nms(cands, params.nms_iou, params.max_dets));
    }
    Ok(out)
}

/// Greedy per-class suppression of boxes overlapping a higher-scored box by
/// more than `iou_threshold`; returns at most `max_dets`, score-descending.
pub fn nms(mut dets: Vec<Detection>, iou_threshold: f64, max_dets: usize) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<Detection> = Vec::new();
    for d in dets {
        if kept.len() >= max_dets {
            break;
        }
        let suppressed = kept
            .iter()
            .any(|k| k.category_id == d.category_id && iou_unchecked(&k.bbox, &d.bbox) > iou_threshold);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

/// Dense training targets for a batch, all shaped `N×c×Hn×Wn`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadTargets<T = f32> {
    pub objectness: Tensor<T>,
    pub class_onehot: Tensor<T>,
    pub boxes: Tensor<T>,
    pub positive: Tensor<T>,
    pub num_positive: usize,
}

/// Assigns each ground-truth box to the neck cell containing its center. When
/// two centers share a cell the smaller box wins.
pub fn encode_targets<T: Scalar>(
    gts: &[Vec<(u32, Xywh)>],
    grid_h: usize,
    grid_w: usize,
    stride: usize,
    num_classes: usize,
) -> Result<HeadTargets<T>> {
    let n = gts.len();
    let plane = grid_h * grid_w;
    let s = stride as f64;
    let (img_w, img_h) = ((grid_w * stride) as f64, (grid_h * stride) as f64);
    let mut owner: Vec<Option<(f64, u32, Xywh)>> = vec![None; n * plane];
    for (b, boxes) in gts.iter().enumerate() {
        for &(cat, bx) in boxes {
            if cat == 0 || cat as usize > num_classes {
                return Err(Error::Config(format!("category {cat} outside 1..={num_classes}")));
            }
            let (cx, cy) = (bx[0] + bx[2] / 2.0, bx[1] + bx[3] / 2.0);
            if !(0.0..img_w).contains(&cx) || !(0.0..img_h).contains(&cy) || bx[2] <= 0.0 || bx[3] <= 0.0 {
                return Err(Error::Dimension(format!(
                    "box {bx:?} center outside {img_w}×{img_h} image"
                )));
            }
            let (i, j) = ((cy / s) as usize, (cx / s) as usize);
            let slot = &mut owner[b * plane + i * grid_w + j];
            let a = area(&bx);
            if slot.is_none_or(|(prev, _, _)| a < prev) {
                *slot = Some((a, cat, bx));
            }
        }
    }
    let mut objectness = Tensor::zeros([n, 1, grid_h, grid_w]);
    let mut class_onehot = Tensor::zeros([n, num_classes, grid_h, grid_w]);
    let mut boxes = Tensor::zeros([n, 4, grid_h, grid_w]);
    let mut num_positive = 0;
    for (idx, slot) in owner.iter().enumerate() {
        let Some((_, cat, bx)) = slot else { continue };
        let (b, cell) = (idx / plane, idx % plane);
        let (i, j) = (cell / grid_w, cell % grid_w);
        num_positive += 1;
        objectness.data_mut()[idx] = T::one();
        class_onehot.data_mut()[(b * num_classes + *cat as usize - 1) * plane + cell] = T::one();
        let enc = [
            (bx[0] + bx[2] / 2.0) / s - (j as f64 + 0.5),
            (bx[1] + bx[3] / 2.0) / s - (i as f64 + 0.5),
            (bx[2] / s).ln(),
            (bx[3] / s).ln(),
        ];
        for (c, v) in enc.into_iter().enumerate() {
            boxes.data_mut()[(b * 4 + c) * plane + cell] = T::of(v);
        }
    }
    let positive = objectness.clone();
    Ok(HeadTargets {
        objectness,
        class_onehot,
        boxes,
        positive,
        num_positive,
    })
}
