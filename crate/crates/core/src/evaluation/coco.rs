use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::bbox::{area, iou_unchecked, Xywh};
use crate::error::{Error, Result};

pub const IOU_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];
pub const MAX_DETS: [usize; 3] = [1, 10, 100];
const RECALL_POINTS: usize = 101;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: u64,
    pub category_id: u32,
    pub bbox: Xywh,
}

/// One detection in the COCO results format.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub image_id: u64,
    pub category_id: u32,
    pub bbox: Xywh,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    AP,
    AR,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum IouSpec {
    #[serde(rename = "0.50:0.95")]
    Range,
    #[serde(rename = "0.50")]
    At50,
    #[serde(rename = "0.75")]
    At75,
}

impl IouSpec {
    fn thresholds(self) -> &'static [usize] {
        match self {
            IouSpec::Range => &[0, 1, 2, 3, 4, 5, 6, 7, 8, 9],
            IouSpec::At50 => &[0],
            IouSpec::At75 => &[5],
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            IouSpec::Range => "0.50:0.95",
            IouSpec::At50 => "0.50",
            IouSpec::At75 => "0.75",
        }
    }
}

/// Object size buckets in squared pixels: small `< 32²`, medium `[32², 96²)`,
/// large `≥ 96²`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AreaRange {
    All,
    Small,
    Medium,
    Large,
}

impl AreaRange {
    pub const ALL: [AreaRange; 4] = [AreaRange::All, AreaRange::Small, AreaRange::Medium, AreaRange::Large];

    pub fn contains(self, a: f64) -> bool {
        const S: f64 = 32.0 * 32.0;
        const M: f64 = 96.0 * 96.0;
        match self {
            AreaRange::All => true,
            AreaRange::Small => a < S,
            AreaRange::Medium => (S..M).contains(&a),
            AreaRange::Large => a >= M,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            AreaRange::All => "All",
            AreaRange::Small => "Small",
            AreaRange::Medium => "Medium",
            AreaRange::Large => "Large",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub metric: Metric,
    pub iou: IouSpec,
    pub area: AreaRange,
    pub max_dets: usize,
    /// In `[0, 1]`, or exactly `-1.0` when the bucket has no ground truth.
    pub value: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore {
    pub category_id: u32,
    pub ap: f64,
    pub ap50: f64,
    pub ar: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    pub per_category: Vec<CategoryScore>,
}

impl EvalReport {
    pub fn get(&self, metric: Metric, iou: IouSpec, area: AreaRange, max_dets: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.metric == metric && r.iou == iou && r.area == area && r.max_dets == max_dets)
            .map(|r| r.value)
    }

    pub fn ap(&self, iou: IouSpec) -> f64 {
        self.get(Metric::AP, iou, AreaRange::All, 100).unwrap_or(-1.0)
    }

    pub fn ar(&self, iou: IouSpec) -> f64 {
        self.get(Metric::AR, iou, AreaRange::All, 100).unwrap_or(-1.0)
    }

    /// Aligned AP and AR tables for one `maxDets` value.
    pub fn table(&self, max_dets: usize) -> String {
        let mut out = String::new();
        for (metric, title) in [
            (Metric::AP, "AVERAGE PRECISION RESULTS"),
            (Metric::AR, "AVERAGE RECALL RESULTS"),
        ] {
            if !out.is_empty() {
                out.push('\n');
            }
            out.push_str(title);
            out.push('\n');
            out.push_str(&format!("{:<8} {:<10} {:<7} {:>7}\n", "maxDets", "IoU", "Area", "Value"));
            for r in self.rows.iter().filter(|r| r.metric == metric && r.max_dets == max_dets) {
                out.push_str(&format!(
                    "{:<8} {:<10} {:<7} {:>7.3}\n",
                    r.max_dets,
                    r.iou.label(),
                    r.area.label(),
                    r.value
                ));
            }
        }
        out
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.table(100))
    }
}

/// Per-(category, area, image) matching state.
struct ImageEval {
    scores: Vec<f64>,
    /// `[threshold][det]`
    matched: Vec<Vec<bool>>,
    ignored: Vec<Vec<bool>>,
    num_gt: usize,
}

fn evaluate_image(dets: &[&Prediction], gts: &[&GroundTruth], range: AreaRange) -> ImageEval {
    let mut order: Vec<usize> = (0..gts.len()).collect();
    let gt_ignored: Vec<bool> = gts.iter().map(|g| !range.contains(area(&g.bbox))).collect();
    order.sort_by_key(|&g| gt_ignored[g]);
    let ious: Vec<Vec<f64>> = dets
        .iter()
        .map(|d| order.iter().map(|&g| iou_unchecked(&d.bbox, &gts[g].bbox)).collect())
        .collect();
    let mut matched = Vec::with_capacity(IOU_THRESHOLDS.len());
    let mut ignored = Vec::with_capacity(IOU_THRESHOLDS.len());
    for &t in &IOU_THRESHOLDS {
        let mut gt_taken = vec![false; order.len()];
        let mut m_row = vec![false; dets.len()];
        let mut i_row = vec![false; dets.len()];
        for (d, det) in dets.iter().enumerate() {
            let mut best: Option<(usize, f64)> = None;
            for (k, &g) in order.iter().enumerate() {
                if gt_taken[k] {
                    continue;
                }
                // Once a real ground truth is matched, ignored ones cannot win.
                if let Some((b, _)) = best {
                    if !gt_ignored[order[b]] && gt_ignored[g] {
                        break;
                    }
                }
                let v = ious[d][k];
                if v >= t && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((k, v));
                }
            }
            match best {
                Some((k, _)) => {
                    gt_taken[k] = true;
                    m_row[d] = true;
                    i_row[d] = gt_ignored[order[k]];
                }
                None => i_row[d] = !range.contains(area(&det.bbox)),
            }
        }
        matched.push(m_row);
        ignored.push(i_row);
    }
    ImageEval {
        scores: dets.iter().map(|d| d.score).collect(),
        matched,
        ignored,
        num_gt: gt_ignored.iter().filter(|&&i| !i).count(),
    }
}

/// Interpolated precision at 101 recall points and final recall, or `None`
/// when there is no ground truth.
fn accumulate(evals: &[ImageEval], t: usize, max_dets: usize) -> Option<([f64; RECALL_POINTS], f64)> {
    let npig: usize = evals.iter().map(|e| e.num_gt).sum();
    if npig == 0 {
        return None;
    }
    let mut rows: Vec<(f64, bool)> = Vec::new();
    for e in evals {
        for d in 0..e.scores.len().min(max_dets) {
            if !e.ignored[t][d] {
                rows.push((e.scores[d], e.matched[t][d]));
            }
        }
    }
    rows.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall = Vec::with_capacity(rows.len());
    let mut precision = Vec::with_capacity(rows.len());
    for &(_, m) in &rows {
        if m {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / npig as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut q = [0.0; RECALL_POINTS];
    for (ri, slot) in q.iter_mut().enumerate() {
        let r = ri as f64 / (RECALL_POINTS - 1) as f64;
        let pi = recall.partition_point(|&rc| rc < r);
        if pi < precision.len() {
            *slot = precision[pi];
        }
    }
    Some((q, recall.last().copied().unwrap_or(0.0)))
}

fn mean_valid(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values.filter(|&v| v > -1.0) {
        sum += v;
        n += 1;
    }
    if n == 0 {
        -1.0
    } else {
        sum / n as f64
    }
}

/// `(IoU, area)` rows of each table, in order. Every row is computed for
/// each value of [`MAX_DETS`].
pub const REPORT_ROWS: [(IouSpec, AreaRange); 6] = [
    (IouSpec::Range, AreaRange::All),
    (IouSpec::At50, AreaRange::All),
    (IouSpec::At75, AreaRange::All),
    (IouSpec::Range, AreaRange::Medium),
    (IouSpec::Range, AreaRange::Large),
    (IouSpec::Range, AreaRange::Small),
];

/// Every prediction that names an image or category outside the evaluated
/// sets, or carries a non-finite value, tagged with its index.
pub fn prediction_errors(preds: &[Prediction], images: &[u64], categories: &[u32]) -> Vec<Error> {
    let image_set: HashSet<u64> = images.iter().copied().collect();
    let cat_set: HashSet<u32> = categories.iter().copied().collect();
    let mut errors = Vec::new();
    for (index, p) in preds.iter().enumerate() {
        let message = if !image_set.contains(&p.image_id) {
            format!("unknown image id {}", p.image_id)
        } else if !cat_set.contains(&p.category_id) {
            format!("unknown category id {}", p.category_id)
        } else if !p.score.is_finite() || p.bbox.iter().any(|v| !v.is_finite()) {
            "non-finite score or box".to_string()
        } else {
            continue;
        };
        errors.push(Error::Record {
            kind: "prediction",
            index,
            message,
        });
    }
    errors
}

/// COCO-protocol AP/AR over `categories`, with category means taken over
/// categories that have ground truth in the bucket.
pub fn coco_ap_ar(
    preds: &[Prediction],
    gts: &[GroundTruth],
    images: &[u64],
    categories: &[u32],
) -> Result<EvalReport> {
    if let Some(e) = prediction_errors(preds, images, categories).into_iter().next() {
        return Err(e);
    }
    let image_set: HashSet<u64> = images.iter().copied().collect();
    let cat_set: HashSet<u32> = categories.iter().copied().collect();
    for (index, g) in gts.iter().enumerate() {
        if !image_set.contains(&g.image_id) || !cat_set.contains(&g.category_id) {
            return Err(Error::Record {
                kind: "ground truth",
                index,
                message: format!("image {} / category {} not evaluated", g.image_id, g.category_id),
            });
        }
    }

    let mut gt_by: HashMap<(u64, u32), Vec<&GroundTruth>> = HashMap::new();
    for g in gts {
        gt_by.entry((g.image_id, g.category_id)).or_default().push(g);
    }
    let mut dt_by: HashMap<(u64, u32), Vec<&Prediction>> = HashMap::new();
    for p in preds {
        dt_by.entry((p.image_id, p.category_id)).or_default().push(p);
    }
    let max_det = *MAX_DETS.last().expect("non-empty");
    for v in dt_by.values_mut() {
        v.sort_by(|a, b| b.score.total_cmp(&a.score));
        v.truncate(max_det);
    }

    // [cat][area][t][maxdet] → (precision curve, recall)
    type Cell = Option<([f64; RECALL_POINTS], f64)>;
    let mut table: Vec<Vec<Vec<Vec<Cell>>>> = Vec::with_capacity(categories.len());
    let empty_d: Vec<&Prediction> = Vec::new();
    let empty_g: Vec<&GroundTruth> = Vec::new();
    for &c in categories {
        let mut per_area = Vec::with_capacity(4);
        for range in AreaRange::ALL {
            let evals: Vec<ImageEval> = images
                .iter()
                .map(|&img| {
                    let d = dt_by.get(&(img, c)).unwrap_or(&empty_d);
                    let g = gt_by.get(&(img, c)).unwrap_or(&empty_g);
                    evaluate_image(d, g, range)
                })
                .collect();
            let per_t = (0..IOU_THRESHOLDS.len())
                .map(|t| MAX_DETS.iter().map(|&m| accumulate(&evals, t, m)).collect())
                .collect();
            per_area.push(per_t);
        }
        table.push(per_area);
    }

    let ap = |k: usize, iou: IouSpec, a: AreaRange, m: usize| -> Vec<f64> {
        iou.thresholds()
            .iter()
            .flat_map(|&t| match &table[k][a.index()][t][m] {
                Some((q, _)) => q.to_vec(),
                None => vec![-1.0],
            })
            .collect()
    };
    let ar = |k: usize, iou: IouSpec, a: AreaRange, m: usize| -> Vec<f64> {
        iou.thresholds()
            .iter()
            .map(|&t| table[k][a.index()][t][m].map_or(-1.0, |(_, r)| r))
            .collect()
    };
    let summarize = |metric: Metric, iou: IouSpec, a: AreaRange, m: usize| -> f64 {
        let vals = (0..categories.len()).flat_map(|k| match metric {
            Metric::AP => ap(k, iou, a, m),
            Metric::AR => ar(k, iou, a, m),
        });
        mean_valid(vals)
    };

    let mut rows = Vec::new();
    for (mi, &m) in MAX_DETS.iter().enumerate().rev() {
        for metric in [Metric::AP, Metric::AR] {
            for (iou, a) in REPORT_ROWS {
                rows.push(ReportRow {
                    metric,
                    iou,
                    area: a,
                    max_dets: m,
                    value: summarize(metric, iou, a, mi),
                });
            }
        }
    }
    let m100 = MAX_DETS.len() - 1;
    let per_category = categories
        .iter()
        .enumerate()
        .map(|(k, &category_id)| CategoryScore {
            category_id,
            ap: mean_valid(ap(k, IouSpec::Range, AreaRange::All, m100).into_iter()),
            ap50: mean_valid(ap(k, IouSpec::At50, AreaRange::All, m100).into_iter()),
            ar: mean_valid(ar(k, IouSpec::Range, AreaRange::All, m100).into_iter()),
        })
        .collect();
    Ok(EvalReport { rows, per_category })
}

/// Ground truth grouped by image, in a form convenient for tests and tools.
pub fn group_by_image(gts: &[GroundTruth]) -> BTreeMap<u64, Vec<GroundTruth>> {
    let mut out: BTreeMap<u64, Vec<GroundTruth>> = BTreeMap::new();
    for g in gts {
        out.entry(g.image_id).or_default().push(*g);
    }
    out
}
