use crate::bbox::{iou_unchecked, Xywh};

/// Outcome of matching one image/category: for each considered prediction
/// the index of the ground truth it claimed, and the reverse map.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MatchResult {
    pub preds: Vec<Option<usize>>,
    pub gts: Vec<Option<usize>>,
}

impl MatchResult {
    pub fn true_positives(&self) -> usize {
        self.preds.iter().filter(|m| m.is_some()).count()
    }

    pub fn false_positives(&self) -> usize {
        self.preds.len() - self.true_positives()
    }

    pub fn false_negatives(&self) -> usize {
        self.gts.iter().filter(|m| m.is_none()).count()
    }
}

/// Greedy one-to-one matching. `preds` must already be sorted by score,
/// highest first; only the first `max_dets` are considered. Each prediction
/// claims the unmatched ground truth of highest IoU, provided it is at least
/// `iou_threshold`.
pub fn match_detections(preds: &[Xywh], gts: &[Xywh], iou_threshold: f64, max_dets: usize) -> MatchResult {
    let mut out = MatchResult {
        preds: Vec::with_capacity(preds.len().min(max_dets)),
        gts: vec![None; gts.len()],
    };
    for (d, p) in preds.iter().take(max_dets).enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if out.gts[g].is_some() {
                continue;
            }
            let v = iou_unchecked(p, gt);
            if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            out.gts[g] = Some(d);
        }
        out.preds.push(best.map(|(g, _)| g));
    }
    out
}

/// `TP/(TP+FP)` and `TP/(TP+FN)`, with `0/0` reported as `-1.0`.
pub fn simple_pr(tp: usize, fp: usize, fn_: usize) -> (f64, f64) {
    let ratio = |num: usize, den: usize| if den == 0 { -1.0 } else { num as f64 / den as f64 };
    (ratio(tp, tp + fp), ratio(tp, tp + fn_))
}
