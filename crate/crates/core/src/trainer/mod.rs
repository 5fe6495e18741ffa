//! Teacher training, student distillation, checkpoints and inference.

mod checkpoint;
mod config;
mod loss;

use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use config::{LossWeights, OptimizerKind, RunConfig, TrainConfig};
pub use loss::{detection_loss, ideal_head, DetectionLossVars};

use crate::backbone::{decode_detections, encode_targets, DecodeParams, Detection, Model, ModelSpec};
use crate::bbox::Xywh;
use crate::dataset::{Batcher, Dataset};
use crate::distill::{boxes_to_cells, total_distill_loss, DistillBreakdown, DistillModule};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_dataset, EvalReport, Prediction};
use crate::tensor::{Graph, Optimizer, Tensor};

/// Column names of the metrics log.
pub const LOG_HEADER: &str = "step\tL_original\tL_fea\tL_at\tL_global\tL_total";

/// Loss values of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub original: f64,
    pub fea: f64,
    pub at: f64,
    pub global: f64,
    pub total: f64,
}

impl StepRecord {
    /// Tab-separated log line; values use the shortest exact representation.
    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.step, self.original, self.fea, self.at, self.global, self.total
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    /// Adapter and global block, when distilling.
    pub distill: Option<DistillModule<f32>>,
    pub log: Vec<StepRecord>,
}

impl TrainOutcome {
    pub fn checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        let meta = serde_json::json!({
            "train": cfg,
            "steps": self.log.len(),
            "distilled": self.distill.is_some(),
        });
        Checkpoint::new(self.model.clone(), meta)
    }
}

/// Trains a fresh model on the detection loss alone. `sink` sees every step
/// as it completes.
pub fn train(
    spec: ModelSpec,
    ds: &Dataset,
    cfg: &TrainConfig,
    sink: &mut dyn FnMut(&StepRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    run(Model::build(spec, cfg.seed)?, None, ds, cfg, sink)
}

/// Trains a fresh student on the detection loss plus the distillation terms
/// against a frozen teacher. With every distillation weight at zero the
/// updates are identical to [`train`].
pub fn distill(
    teacher: &Model<f32>,
    student: ModelSpec,
    ds: &Dataset,
    cfg: &TrainConfig,
    sink: &mut dyn FnMut(&StepRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    if teacher.spec().total_stride() != student.total_stride() {
        return Err(Error::Dimension(format!(
            "teacher stride {} and student stride {} give different neck sizes",
            teacher.spec().total_stride(),
            student.total_stride()
        )));
    }
    run(Model::build(student, cfg.seed)?, Some(teacher), ds, cfg, sink)
}

fn run(
    mut student: Model<f32>,
    teacher: Option<&Model<f32>>,
    ds: &Dataset,
    cfg: &TrainConfig,
    sink: &mut dyn FnMut(&StepRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let stride = student.spec().total_stride();
    let size = cfg.input_size;
    let batcher = Batcher::new(ds, cfg.batch_size, (size, size), stride, cfg.seed, true)?;
    let grid = size / stride;
    let classes = student.spec().head.num_classes;
    let mut module = match teacher {
        Some(t) => Some(DistillModule::<f32>::build(
            t.spec().neck_channels,
            student.spec().neck_channels,
            cfg.seed,
        )?),
        None => None,
    };
    let mut opt = Optimizer::new(cfg.optimizer_rule());
    let mut module_opt = Optimizer::new(cfg.optimizer_rule());
    let mut log = Vec::new();
    'epochs: for epoch in 0..cfg.epochs {
        for batch in batcher.epoch(epoch) {
            if cfg.max_steps.is_some_and(|m| log.len() >= m) {
                break 'epochs;
            }
            let mut g = Graph::<f32>::new();
            let svars = student.params().bind(&mut g);
            let images = g.constant(batch.images);
            let out = student.forward(&mut g, &svars, images)?;
            let targets = encode_targets::<f32>(&batch.boxes, grid, grid, stride, classes)?;
            let det = detection_loss(&mut g, out.head, &targets, &cfg.loss)?;
            let mut total = det.total;
            let mut parts = DistillBreakdown::default();
            let mut module_vars = None;
            if let (Some(t), Some(m)) = (teacher, module.as_ref()) {
                let tvars = t.params().bind_frozen(&mut g);
                let tout = t.forward(&mut g, &tvars, images)?;
                let mvars = m.params().bind(&mut g);
                let cells: Vec<Vec<Xywh>> = batch
                    .boxes
                    .iter()
                    .map(|bs| {
                        let bs: Vec<Xywh> = bs.iter().map(|&(_, b)| b).collect();
                        boxes_to_cells(&bs, stride, grid, grid)
                    })
                    .collect();
                let d = total_distill_loss(&mut g, tout.neck, out.neck, &cells, &cfg.distill, &m.vars(&mvars))?;
                parts = d.breakdown(&g);
                if let Some(d_total) = d.total {
                    total = g.add(total, d_total)?;
                }
                module_vars = Some(mvars);
            }
            let record = StepRecord {
                step: log.len(),
                original: g.item(det.total) as f64,
                fea: parts.fea,
                at: parts.at,
                global: parts.global,
                total: g.item(total) as f64,
            };
            if !record.total.is_finite() {
                return Err(Error::NonFinite(format!("training loss at step {}", record.step)));
            }
            g.backward(total)?;
            student.params_mut().zero_grads();
            student.params_mut().accumulate_grads(&g, &svars);
            opt.step(student.params_mut())?;
            if let (Some(m), Some(vars)) = (module.as_mut(), module_vars) {
                m.params_mut().zero_grads();
                m.params_mut().accumulate_grads(&g, &vars);
                module_opt.step(m.params_mut())?;
            }
            sink(&record)?;
            log.push(record);
        }
    }
    // the returned weights carry no stale step gradients
    student.params_mut().zero_grads();
    if let Some(m) = module.as_mut() {
        m.params_mut().zero_grads();
    }
    Ok(TrainOutcome {
        model: student,
        distill: module,
        log,
    })
}

/// Detections for `N×1×H×W` network inputs, in input pixel coordinates.
pub fn predict_images(model: &Model<f32>, images: &Tensor<f32>, params: DecodeParams) -> Result<Vec<Vec<Detection>>> {
    let mut g = Graph::<f32>::new();
    let vars = model.params().bind_frozen(&mut g);
    let x = g.constant(images.clone());
    let out = model.forward(&mut g, &vars, x)?;
    decode_detections(g.value(out.head), model.spec().total_stride(), params)
}

/// Detections for every page of `ds`, mapped back to page coordinates.
pub fn predict_dataset(
    model: &Model<f32>,
    ds: &Dataset,
    input_size: usize,
    params: DecodeParams,
) -> Result<Vec<Prediction>> {
    let stride = model.spec().total_stride();
    let batcher = Batcher::new(ds, 16, (input_size, input_size), stride, 0, false)?;
    let mut preds = Vec::new();
    for batch in batcher.epoch(0) {
        let dets = predict_images(model, &batch.images, params)?;
        for (&i, dets) in batch.indices.iter().zip(dets) {
            let lb = batcher.letterbox(i);
            for d in dets {
                if let Some(bbox) = lb.inverse(&d.bbox) {
                    preds.push(Prediction {
                        image_id: ds.pages[i].id,
                        category_id: d.category_id,
                        bbox,
                        score: d.score,
                    });
                }
            }
        }
    }
    Ok(preds)
}

/// Decode settings used when scoring a model: a low score floor so the
/// precision-recall curve extends to low-confidence detections.
pub fn eval_decode_params() -> DecodeParams {
    DecodeParams {
        score_threshold: 0.01,
        ..DecodeParams::default()
    }
}

pub fn evaluate_model(model: &Model<f32>, ds: &Dataset, input_size: usize) -> Result<EvalReport> {
    evaluate_dataset(&predict_dataset(model, ds, input_size, eval_decode_params())?, ds)
}
