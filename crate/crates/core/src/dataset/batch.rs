use image::imageops::{resize, FilterType};
use image::GrayImage;
use rand::seq::SliceRandom;

use super::Dataset;
use crate::bbox::{clip, Xywh};
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::Tensor;

/// Aspect-preserving resize into a `dst_w×dst_h` frame, centred, with the
/// margins left as background.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Letterbox {
    pub src_w: u32,
    pub src_h: u32,
    pub dst_w: u32,
    pub dst_h: u32,
    /// Size of the resized page inside the frame.
    pub inner_w: u32,
    pub inner_h: u32,
    pub pad_x: u32,
    pub pad_y: u32,
}

impl Letterbox {
    pub fn new(src_w: u32, src_h: u32, dst_w: u32, dst_h: u32) -> Self {
        let scale = (dst_w as f64 / src_w as f64).min(dst_h as f64 / src_h as f64);
        let inner_w = ((src_w as f64 * scale).round() as u32).clamp(1, dst_w);
        let inner_h = ((src_h as f64 * scale).round() as u32).clamp(1, dst_h);
        Letterbox {
            src_w,
            src_h,
            dst_w,
            dst_h,
            inner_w,
            inner_h,
            pad_x: (dst_w - inner_w) / 2,
            pad_y: (dst_h - inner_h) / 2,
        }
    }

    /// Horizontal and vertical scale factors actually applied to pixels.
    pub fn scales(&self) -> (f64, f64) {
        (
            self.inner_w as f64 / self.src_w as f64,
            self.inner_h as f64 / self.src_h as f64,
        )
    }

    /// Page box → frame box, clipped to the frame.
    pub fn forward(&self, b: &Xywh) -> Option<Xywh> {
        let (sx, sy) = self.scales();
        let mapped = [
            b[0] * sx + self.pad_x as f64,
            b[1] * sy + self.pad_y as f64,
            b[2] * sx,
            b[3] * sy,
        ];
        clip(&mapped, self.dst_w as f64, self.dst_h as f64)
    }

    /// Frame box → page box, clipped to the page.
    pub fn inverse(&self, b: &Xywh) -> Option<Xywh> {
        let (sx, sy) = self.scales();
        let mapped = [
            (b[0] - self.pad_x as f64) / sx,
            (b[1] - self.pad_y as f64) / sy,
            b[2] / sx,
            b[3] / sy,
        ];
        clip(&mapped, self.src_w as f64, self.src_h as f64)
    }

    /// Resizes 8-bit pixels into the frame as ink values `1 − v/255`, so
    /// white background and padding are both 0.
    pub fn apply_image(&self, pixels: &[u8]) -> Result<Vec<f32>> {
        let img = GrayImage::from_raw(self.src_w, self.src_h, pixels.to_vec()).ok_or_else(|| {
            Error::Dimension(format!(
                "{} pixels for a {}×{} page",
                pixels.len(),
                self.src_w,
                self.src_h
            ))
        })?;
        let inner = if (self.inner_w, self.inner_h) == (self.src_w, self.src_h) {
            img
        } else {
            resize(&img, self.inner_w, self.inner_h, FilterType::Triangle)
        };
        let (dw, iw) = (self.dst_w as usize, self.inner_w as usize);
        let mut out = vec![0.0f32; dw * self.dst_h as usize];
        for (y, row) in inner.as_raw().chunks(iw).enumerate() {
            let start = (y + self.pad_y as usize) * dw + self.pad_x as usize;
            for (o, &v) in out[start..start + iw].iter_mut().zip(row) {
                *o = 1.0 - v as f32 / 255.0;
            }
        }
        Ok(out)
    }
}

/// One mini-batch: `N×1×H×W` ink images, per-image `(category, box)` lists in
/// frame pixels, and the dataset indices of the pages.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub boxes: Vec<Vec<(u32, Xywh)>>,
    pub indices: Vec<usize>,
}

/// Letterboxed copies of every page plus deterministic epoch ordering.
#[derive(Clone, Debug)]
pub struct Batcher {
    images: Vec<Vec<f32>>,
    boxes: Vec<Vec<(u32, Xywh)>>,
    letterboxes: Vec<Letterbox>,
    height: usize,
    width: usize,
    batch_size: usize,
    seed: u64,
    shuffle: bool,
}

impl Batcher {
    pub fn new(
        ds: &Dataset,
        batch_size: usize,
        (height, width): (usize, usize),
        stride: usize,
        seed: u64,
        shuffle: bool,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be ≥ 1".into()));
        }
        if height == 0 || width == 0 || stride == 0 || height % stride != 0 || width % stride != 0 {
            return Err(Error::Config(format!(
                "input size {height}×{width} is not a positive multiple of stride {stride}"
            )));
        }
        let mut images = Vec::with_capacity(ds.len());
        let mut boxes = Vec::with_capacity(ds.len());
        let mut letterboxes = Vec::with_capacity(ds.len());
        for (i, page) in ds.pages.iter().enumerate() {
            let lb = Letterbox::new(page.width, page.height, width as u32, height as u32);
            images.push(lb.apply_image(&ds.pixels(i)?)?);
            boxes.push(
                page.annotations
                    .iter()
                    .filter_map(|a| lb.forward(&a.bbox).map(|b| (a.category_id, b)))
                    .collect(),
            );
            letterboxes.push(lb);
        }
        Ok(Batcher {
            images,
            boxes,
            letterboxes,
            height,
            width,
            batch_size,
            seed,
            shuffle,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.len().div_ceil(self.batch_size)
    }

    pub fn letterbox(&self, index: usize) -> &Letterbox {
        &self.letterboxes[index]
    }

    /// Page order for `epoch`: identity without shuffling, else a permutation
    /// fixed by `(seed, epoch)`.
    pub fn order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        if self.shuffle {
            order.shuffle(&mut stream(self.seed.wrapping_add(epoch as u64), "batch-order"));
        }
        order
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let plane = self.height * self.width;
        let mut data = Vec::with_capacity(indices.len() * plane);
        for &i in indices {
            data.extend_from_slice(&self.images[i]);
        }
        Batch {
            images: Tensor::new([indices.len(), 1, self.height, self.width], data).expect("plane-sized images"),
            boxes: indices.iter().map(|&i| self.boxes[i].clone()).collect(),
            indices: indices.to_vec(),
        }
    }

    pub fn epoch(&self, epoch: usize) -> impl Iterator<Item = Batch> + '_ {
        let order = self.order(epoch);
        (0..self.batches_per_epoch()).map(move |b| {
            let end = ((b + 1) * self.batch_size).min(order.len());
            self.batch(&order[b * self.batch_size..end])
        })
    }
}
