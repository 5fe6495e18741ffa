use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{categories, category_name, Annotation, Dataset, PageRecord};
use crate::bbox::Xywh;
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    #[serde(default)]
    categories: Vec<CocoCategory>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
    width: u32,
    height: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoAnnotation {
    #[serde(default)]
    id: u64,
    image_id: u64,
    category_id: u32,
    bbox: Xywh,
    #[serde(default)]
    area: f64,
    #[serde(default)]
    iscrowd: u8,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoCategory {
    id: u32,
    name: String,
    #[serde(default)]
    supercategory: String,
}

/// Parses and validates a COCO-style annotation file. Image files are
/// resolved relative to the file's directory.
pub fn load_annotations(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut ds = parse_annotations(&text)?;
    ds.root = path.parent().unwrap_or(Path::new("")).to_path_buf();
    Ok(ds)
}

pub fn parse_annotations(text: &str) -> Result<Dataset> {
    let file: CocoFile = serde_json::from_str(text)?;
    for (index, c) in file.categories.iter().enumerate() {
        if category_name(c.id) != Some(c.name.as_str()) {
            return Err(Error::Record {
                kind: "category",
                index,
                message: format!(
                    "id {} named {:?}, expected {:?}",
                    c.id,
                    c.name,
                    category_name(c.id).unwrap_or("<none>")
                ),
            });
        }
    }
    let mut pages = Vec::with_capacity(file.images.len());
    let mut by_id = HashMap::new();
    for (index, img) in file.images.into_iter().enumerate() {
        if img.width == 0 || img.height == 0 {
            return Err(Error::Record {
                kind: "image",
                index,
                message: format!("image {} has zero size", img.id),
            });
        }
        if by_id.insert(img.id, pages.len()).is_some() {
            return Err(Error::Record {
                kind: "image",
                index,
                message: format!("duplicate image id {}", img.id),
            });
        }
        pages.push(PageRecord {
            id: img.id,
            file_name: img.file_name,
            width: img.width,
            height: img.height,
            pixels: None,
            annotations: Vec::new(),
        });
    }
    for (index, a) in file.annotations.into_iter().enumerate() {
        let Some(&p) = by_id.get(&a.image_id) else {
            return Err(Error::Record {
                kind: "annotation",
                index,
                message: format!("image_id {} does not exist", a.image_id),
            });
        };
        let ann = Annotation {
            category_id: a.category_id,
            bbox: a.bbox,
        };
        pages[p]
            .validate_annotation(&ann)
            .map_err(|message| Error::Record {
                kind: "annotation",
                index,
                message,
            })?;
        pages[p].annotations.push(ann);
    }
    Ok(Dataset::new(pages, ""))
}

/// COCO JSON for `ds` with all 21 categories and sequential annotation ids.
pub fn to_coco_json(ds: &Dataset) -> Result<String> {
    let mut annotations = Vec::with_capacity(ds.num_annotations());
    for page in &ds.pages {
        for a in &page.annotations {
            annotations.push(CocoAnnotation {
                id: annotations.len() as u64 + 1,
                image_id: page.id,
                category_id: a.category_id,
                bbox: a.bbox,
                area: a.bbox[2] * a.bbox[3],
                iscrowd: 0,
            });
        }
    }
    let file = CocoFile {
        images: ds
            .pages
            .iter()
            .map(|p| CocoImage {
                id: p.id,
                file_name: p.file_name.clone(),
                width: p.width,
                height: p.height,
            })
            .collect(),
        annotations,
        categories: categories()
            .map(|c| CocoCategory {
                id: c.id,
                name: c.name.to_string(),
                supercategory: "datasheet".into(),
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn save_annotations(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_coco_json(ds)?).map_err(|e| Error::io(path, e))
}
