use super::config::LossWeights;
use crate::backbone::HeadTargets;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Terms of the detection loss. Class and box terms exist only when the
/// batch has at least one positive cell.
#[derive(Clone, Copy, Debug)]
pub struct DetectionLossVars {
    pub objectness: Var,
    pub class: Option<Var>,
    pub boxes: Option<Var>,
    pub total: Var,
}

/// Objectness BCE averaged over all cells, plus class cross-entropy and
/// mean L1 box-offset error over positive cells, each weighted.
pub fn detection_loss<T: Scalar>(
    g: &mut Graph<T>,
    head: Var,
    targets: &HeadTargets<T>,
    weights: &LossWeights,
) -> Result<DetectionLossVars> {
    let shape = g.shape(head).to_vec();
    let k = targets.class_onehot.shape().get(1).copied().unwrap_or(0);
    if shape.len() != 4 || shape[1] != 1 + k + 4 || targets.objectness.shape() != [shape[0], 1, shape[2], shape[3]] {
        return Err(Error::Dimension(format!(
            "head {shape:?} does not fit targets {:?} with {k} classes",
            targets.objectness.shape()
        )));
    }
    let obj_logits = g.narrow(head, 1, 0, 1)?;
    let bce = g.bce_with_logits(obj_logits, &targets.objectness)?;
    let bce = g.mean_all(bce)?;
    let objectness = g.scale(bce, T::of(weights.objectness))?;
    let (mut class, mut boxes) = (None, None);
    if targets.num_positive > 0 {
        let npos = targets.num_positive as f64;
        let logits = g.narrow(head, 1, 1, k)?;
        let logp = g.log_softmax(logits, &[1])?;
        let onehot = g.constant(targets.class_onehot.clone());
        let picked = g.mul(logp, onehot)?;
        let picked = g.sum_all(picked)?;
        class = Some(g.scale(picked, T::of(-weights.class / npos))?);

        let pred = g.narrow(head, 1, 1 + k, 4)?;
        let target = g.constant(targets.boxes.clone());
        let diff = g.sub(pred, target)?;
        let diff = g.abs(diff)?;
        let mask = g.constant(targets.positive.clone());
        let diff = g.mul(diff, mask)?;
        let diff = g.sum_all(diff)?;
        boxes = Some(g.scale(diff, T::of(weights.box_l1 / (4.0 * npos)))?);
    }
    let mut total = objectness;
    for term in [class, boxes].into_iter().flatten() {
        total = g.add(total, term)?;
    }
    Ok(DetectionLossVars {
        objectness,
        class,
        boxes,
        total,
    })
}

/// Constant head output that decodes exactly to `targets`, with objectness
/// and class logits pushed to `±confidence`.
pub fn ideal_head<T: Scalar>(targets: &HeadTargets<T>, confidence: f64) -> Tensor<T> {
    let obj = targets.objectness.shape();
    let (n, h, w) = (obj[0], obj[2], obj[3]);
    let k = targets.class_onehot.shape()[1];
    let plane = h * w;
    let ch = 1 + k + 4;
    Tensor::from_fn([n, ch, h, w], |idx| {
        let (b, c, cell) = (idx / (ch * plane), (idx / plane) % ch, idx % plane);
        let pick = |t: &Tensor<T>, cc: usize, cs: usize| t.data()[(b * cs + cc) * plane + cell];
        if c == 0 {
            T::of(if pick(&targets.objectness, 0, 1).as_f64() > 0.5 { confidence } else { -confidence })
        } else if c <= k {
            T::of(if pick(&targets.class_onehot, c - 1, k).as_f64() > 0.5 { confidence } else { -confidence })
        } else {
            pick(&targets.boxes, c - 1 - k, 4)
        }
    })
}
