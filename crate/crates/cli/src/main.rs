use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use edoc_core::backbone::{DecodeParams, ModelSpec};
use edoc_core::dataset::{
    load_annotations, read_gray, save_annotations, synth_dataset, Dataset, PageRecord, Profile,
};
use edoc_core::evaluation::{
    coco_ap_ar, ground_truth, load_predictions, prediction_errors, save_predictions, taxonomy_ids, MAX_DETS,
};
use edoc_core::trainer::{self, Checkpoint, RunConfig, StepRecord, LOG_HEADER};

mod render;

#[derive(Parser)]
#[command(name = "edoc", version, about = "Document-layout detection with focal and global distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic datasheet pages and their annotation file.
    GenSynth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        pages: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 128)]
        width: u32,
        #[arg(long, default_value_t = 128)]
        height: u32,
        /// `desk` (6 categories) or `balanced` (all 21).
        #[arg(long, default_value = "desk")]
        profile: Profile,
    },
    /// Train a model on the detection loss.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a student against a frozen teacher checkpoint.
    Distill {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a predictions file against an annotation file.
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        /// Which maxDets block to print (1, 10 or 100).
        #[arg(long, default_value_t = 100)]
        max_dets: usize,
        /// Structured report destination.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also print per-category AP.
        #[arg(long)]
        per_category: bool,
    },
    /// Run a checkpoint over a directory of pages.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory with `annotations.json`, or with bare PGM/PNG pages.
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        score_threshold: f64,
        #[arg(long, default_value_t = 0.5)]
        nms_iou: f64,
        #[arg(long, default_value_t = 100)]
        max_dets: usize,
        /// Network input side; defaults to the one used in training.
        #[arg(long)]
        input_size: Option<usize>,
    },
    /// Draw predicted boxes over a page.
    Render {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Image id to draw; inferred from the file name's trailing digits.
        #[arg(long)]
        image_id: Option<u64>,
        /// Stamp each box with its category id.
        #[arg(long)]
        labels: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match threads().and_then(|_| run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numeric = e
                .chain()
                .any(|c| matches!(c.downcast_ref::<edoc_core::Error>(), Some(edoc_core::Error::NonFinite(_))));
            ExitCode::from(if numeric { 3 } else { 2 })
        }
    }
}

/// Every kernel runs on the calling thread, so the cap only needs validating.
fn threads() -> Result<usize> {
    match std::env::var("EDOC_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => bail!("EDOC_THREADS must be a positive integer, got {v:?}"),
        },
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenSynth {
            out,
            pages,
            seed,
            width,
            height,
            profile,
        } => gen_synth(&out, pages, seed, width, height, profile),
        Command::Train { config, out } => train(&config, &out, false),
        Command::Distill { config, out } => train(&config, &out, true),
        Command::Eval {
            gt,
            pred,
            max_dets,
            out,
            per_category,
        } => eval(&gt, &pred, max_dets, out.as_deref(), per_category),
        Command::Predict {
            ckpt,
            images,
            out,
            score_threshold,
            nms_iou,
            max_dets,
            input_size,
        } => {
            let params = DecodeParams {
                score_threshold,
                nms_iou,
                max_dets,
            };
            predict(&ckpt, &images, &out, params, input_size)
        }
        Command::Render {
            image,
            pred,
            out,
            image_id,
            labels,
        } => render_cmd(&image, &pred, &out, image_id, labels),
    }
}

fn gen_synth(out: &Path, pages: usize, seed: u64, width: u32, height: u32, profile: Profile) -> Result<()> {
    let mut ds = synth_dataset(pages, seed, width, height, profile)?;
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    ds.write_images(out)?;
    let ann = out.join("annotations.json");
    save_annotations(&ds, &ann)?;
    eprintln!(
        "wrote {} pages with {} boxes to {}",
        ds.len(),
        ds.num_annotations(),
        out.display()
    );
    Ok(())
}

fn train(config: &Path, out: &Path, distill: bool) -> Result<()> {
    let rc = RunConfig::load(config)?;
    let cfg = &rc.train;
    let ds = load_annotations(&rc.train_annotations)?;
    let spec = ModelSpec::by_name(&cfg.model)?;
    let teacher = if distill {
        let path = rc
            .teacher
            .as_ref()
            .context("missing required key `train.teacher` for distillation")?;
        Some(Checkpoint::load(path)?.model)
    } else {
        None
    };
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let log_path = out.join("metrics.tsv");
    let mut log = BufWriter::new(File::create(&log_path).with_context(|| format!("cannot create {}", log_path.display()))?);
    writeln!(log, "{LOG_HEADER}")?;
    let mut sink = |r: &StepRecord| -> edoc_core::Result<()> {
        writeln!(log, "{}", r.to_tsv())
            .and_then(|_| log.flush())
            .map_err(|e| edoc_core::Error::Io {
                path: log_path.clone(),
                source: e,
            })
    };
    let outcome = match &teacher {
        Some(t) => trainer::distill(t, spec, &ds, cfg, &mut sink),
        None => trainer::train(spec, &ds, cfg, &mut sink),
    }?;
    let ckpt = out.join("model.ckpt");
    outcome.checkpoint(cfg).save(&ckpt)?;
    eprintln!("{} steps; checkpoint {}", outcome.log.len(), ckpt.display());
    if let Some(val) = &rc.val_annotations {
        let val = load_annotations(val)?;
        let report = trainer::evaluate_model(&outcome.model, &val, cfg.input_size)?;
        fs::write(out.join("val_report.json"), serde_json::to_string_pretty(&report)?)?;
        print!("{report}");
    }
    Ok(())
}

fn eval(gt: &Path, pred: &Path, max_dets: usize, out: Option<&Path>, per_category: bool) -> Result<()> {
    if !MAX_DETS.contains(&max_dets) {
        bail!("--max-dets must be one of {MAX_DETS:?}");
    }
    let ds = load_annotations(gt)?;
    let preds = load_predictions(pred)?;
    let (gts, images) = ground_truth(&ds);
    let cats = taxonomy_ids();
    let errors = prediction_errors(&preds, &images, &cats);
    if !errors.is_empty() {
        for e in &errors {
            eprintln!("{e}");
        }
        bail!("{} prediction records do not match {}", errors.len(), gt.display());
    }
    let report = coco_ap_ar(&preds, &gts, &images, &cats)?;
    print!("{}", report.table(max_dets));
    if per_category {
        println!("\nPER-CATEGORY AP (0.50:0.95 / 0.50)");
        for c in report.per_category.iter().filter(|c| c.ap >= 0.0) {
            let name = edoc_core::dataset::category_name(c.category_id).unwrap_or("?");
            println!("{:<3} {:<30} {:>6.3} {:>6.3}", c.category_id, name, c.ap, c.ap50);
        }
    }
    if let Some(out) = out {
        fs::write(out, serde_json::to_string_pretty(&report)?).with_context(|| format!("cannot write {}", out.display()))?;
    }
    Ok(())
}

/// Pages listed in `dir/annotations.json`, or every PGM/PNG file in `dir`
/// in name order with ids `1..`.
fn load_pages(dir: &Path) -> Result<Dataset> {
    let ann = dir.join("annotations.json");
    if ann.exists() {
        return Ok(load_annotations(ann)?);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("cannot read {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "pgm" | "png"))
        })
        .collect();
    files.sort();
    let mut pages = Vec::with_capacity(files.len());
    for (i, path) in files.iter().enumerate() {
        let (width, height, px) = read_gray(path)?;
        pages.push(PageRecord {
            id: i as u64 + 1,
            file_name: path.file_name().unwrap_or_default().to_string_lossy().into_owned(),
            width,
            height,
            pixels: Some(px),
            annotations: Vec::new(),
        });
    }
    Ok(Dataset::new(pages, dir))
}

fn predict(ckpt: &Path, images: &Path, out: &Path, params: DecodeParams, input_size: Option<usize>) -> Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    let size = match input_size {
        Some(s) => s,
        None => ck.meta["train"]["input_size"]
            .as_u64()
            .context("checkpoint does not record its input size; pass --input-size")? as usize,
    };
    let ds = load_pages(images)?;
    let preds = trainer::predict_dataset(&ck.model, &ds, size, params)?;
    save_predictions(out, &preds)?;
    eprintln!("{} detections on {} pages", preds.len(), ds.len());
    Ok(())
}

fn trailing_id(path: &Path) -> Option<u64> {
    let stem = path.file_stem()?.to_str()?;
    let digits: String = stem.chars().rev().take_while(|c| c.is_ascii_digit()).collect();
    digits.chars().rev().collect::<String>().parse().ok()
}

fn render_cmd(image: &Path, pred: &Path, out: &Path, image_id: Option<u64>, labels: bool) -> Result<()> {
    let (w, h, px) = read_gray(image)?;
    let preds = load_predictions(pred)?;
    let id = image_id.or_else(|| trailing_id(image));
    let mine: Vec<_> = preds.iter().filter(|p| Some(p.image_id) == id).collect();
    if mine.is_empty() {
        eprintln!(
            "warning: no predictions for image {} ({}); writing it unchanged",
            id.map_or("?".to_string(), |i| i.to_string()),
            image.display()
        );
    }
    let boxes: Vec<_> = mine.iter().map(|p| (p.category_id, p.bbox)).collect();
    render::render(w, h, &px, &boxes, labels, out)
}
