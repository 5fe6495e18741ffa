//! Datasheet pages: the 21-category taxonomy, COCO-style annotation files,
//! grayscale image IO, a synthetic page generator and letterboxed batching.

mod batch;
mod coco;
mod image_io;
mod synth;

use std::borrow::Cow;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::bbox::Xywh;
use crate::error::{Error, Result};
use crate::rng::stream;

pub use batch::{Batch, Batcher, Letterbox};
pub use coco::{load_annotations, parse_annotations, save_annotations, to_coco_json};
pub use image_io::{read_gray, write_gray};
pub use synth::{synth_dataset, synth_page, Profile};

/// Category names in id order (id = index + 1).
pub const CATEGORY_NAMES: [&str; 21] = [
    "functional_block_diagram",
    "flowchart",
    "characteristic_curve_diagram",
    "timing_diagram",
    "circuit_diagram",
    "pin_diagram",
    "engineering_drawing",
    "sampling_diagram",
    "three_d_schematic_diagram",
    "pin_name_diagram",
    "marking_diagram",
    "appearance_diagram",
    "functional_register_diagram",
    "layout_diagram",
    "data_structure_diagram",
    "text",
    "table",
    "title",
    "list",
    "caption",
    "other",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Category {
    pub id: u32,
    pub name: &'static str,
}

pub fn categories() -> impl Iterator<Item = Category> {
    CATEGORY_NAMES.iter().enumerate().map(|(i, &name)| Category {
        id: i as u32 + 1,
        name,
    })
}

pub fn category_name(id: u32) -> Option<&'static str> {
    CATEGORY_NAMES.get((id as usize).checked_sub(1)?).copied()
}

pub fn category_id(name: &str) -> Option<u32> {
    CATEGORY_NAMES.iter().position(|&n| n == name).map(|i| i as u32 + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub category_id: u32,
    pub bbox: Xywh,
}

/// One page: size, pixels (in memory or a file relative to the dataset
/// root), and its annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct PageRecord {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
    pub pixels: Option<Vec<u8>>,
    pub annotations: Vec<Annotation>,
}

impl PageRecord {
    /// Checks the category id and that `bbox` has positive size inside the page.
    pub fn validate_annotation(&self, a: &Annotation) -> std::result::Result<(), String> {
        if category_name(a.category_id).is_none() {
            return Err(format!("unknown category id {}", a.category_id));
        }
        let [x, y, w, h] = a.bbox;
        if !a.bbox.iter().all(|v| v.is_finite()) || w <= 0.0 || h <= 0.0 {
            return Err(format!("degenerate bbox {:?}", a.bbox));
        }
        if x < 0.0 || y < 0.0 || x + w > self.width as f64 || y + h > self.height as f64 {
            return Err(format!(
                "bbox {:?} outside {}×{} image {}",
                a.bbox, self.width, self.height, self.id
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub pages: Vec<PageRecord>,
    /// Directory that `file_name`s are relative to.
    pub root: PathBuf,
}

impl Dataset {
    pub fn new(pages: Vec<PageRecord>, root: impl Into<PathBuf>) -> Self {
        Dataset {
            pages,
            root: root.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.pages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pages.is_empty()
    }

    pub fn num_annotations(&self) -> usize {
        self.pages.iter().map(|p| p.annotations.len()).sum()
    }

    /// Pixels of page `i`, read from disk when not held in memory.
    pub fn pixels(&self, i: usize) -> Result<Cow<'_, [u8]>> {
        let page = &self.pages[i];
        if let Some(px) = &page.pixels {
            return Ok(Cow::Borrowed(px));
        }
        let path = self.root.join(&page.file_name);
        let (w, h, px) = read_gray(&path)?;
        if (w, h) != (page.width, page.height) {
            return Err(Error::Record {
                kind: "image",
                index: i,
                message: format!(
                    "{} is {w}×{h}, annotations say {}×{}",
                    path.display(),
                    page.width,
                    page.height
                ),
            });
        }
        Ok(Cow::Owned(px))
    }

    /// Writes in-memory pixels as `root/file_name` and drops them from memory.
    pub fn write_images(&mut self, root: &Path) -> Result<()> {
        for page in &mut self.pages {
            if let Some(px) = page.pixels.take() {
                write_gray(&root.join(&page.file_name), page.width, page.height, &px)?;
            }
        }
        self.root = root.to_path_buf();
        Ok(())
    }

    /// Deterministic disjoint train/val/test partition. Sizes are
    /// `round(n·f_train)`, `round(n·f_val)` and the remainder.
    pub fn split(&self, fractions: [f64; 3], seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
        let sum: f64 = fractions.iter().sum();
        if fractions.iter().any(|&f| !(f.is_finite() && f > 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions {fractions:?} must be positive and sum to 1"
            )));
        }
        let n = self.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream(seed, "split"));
        let n_train = ((n as f64 * fractions[0]).round() as usize).min(n);
        let n_val = ((n as f64 * fractions[1]).round() as usize).min(n - n_train);
        let part = |idx: &[usize]| {
            let mut idx = idx.to_vec();
            idx.sort_unstable();
            Dataset::new(idx.iter().map(|&i| self.pages[i].clone()).collect(), self.root.clone())
        };
        Ok((
            part(&order[..n_train]),
            part(&order[n_train..n_train + n_val]),
            part(&order[n_train + n_val..]),
        ))
    }
}
