//! COCO-protocol AP/AR scoring and the plain precision/recall formulas.

mod coco;
mod matching;

use std::fs;
use std::path::Path;

pub use crate::bbox::iou;
pub use coco::{
    coco_ap_ar, group_by_image, prediction_errors, AreaRange, CategoryScore, EvalReport, GroundTruth, IouSpec, Metric, Prediction,
    ReportRow, IOU_THRESHOLDS, MAX_DETS, REPORT_ROWS,
};
pub use matching::{match_detections, simple_pr, MatchResult};

use crate::dataset::Dataset;
use crate::error::{Error, Result};

/// Reads a COCO results file: a JSON array of predictions.
pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<Prediction>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn save_predictions(path: impl AsRef<Path>, preds: &[Prediction]) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, serde_json::to_string_pretty(preds)?).map_err(|e| Error::io(path, e))
}

/// Ground truth and image ids of a dataset, ready for [`coco_ap_ar`].
pub fn ground_truth(ds: &Dataset) -> (Vec<GroundTruth>, Vec<u64>) {
    let mut gts = Vec::with_capacity(ds.num_annotations());
    for page in &ds.pages {
        gts.extend(page.annotations.iter().map(|a| GroundTruth {
            image_id: page.id,
            category_id: a.category_id,
            bbox: a.bbox,
        }));
    }
    (gts, ds.pages.iter().map(|p| p.id).collect())
}

pub fn taxonomy_ids() -> Vec<u32> {
    crate::dataset::categories().map(|c| c.id).collect()
}

/// Scores predictions against a dataset over the full category taxonomy.
pub fn evaluate_dataset(preds: &[Prediction], ds: &Dataset) -> Result<EvalReport> {
    let (gts, images) = ground_truth(ds);
    coco_ap_ar(preds, &gts, &images, &taxonomy_ids())
}
