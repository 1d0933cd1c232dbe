use std::path::PathBuf;

use capdet::data::{Image, LoadedSample};
use capdet::eval::io::{densecap_by_image, read_records, write_records, Record};
use capdet::eval::plot::{heatmap_svg, pr_curves_svg};
use capdet::eval::{
    coco_thresholds, dense_caption, densecap_map, detection_ap, parallel_chunks, zero_shot_detect, CaptionedBox,
    CategoryList, DenseCapConfig, DenseCapPrediction, DetectConfig, LabeledBox,
};
use capdet::model::CapDet;
use capdet::train::checkpoint;
use clap::Args;

use crate::common::{
    category_of_concept, load_dataset, load_dictionary, load_spec, require_file, resolve_categories, write_json,
    CliError, Ranking, CURVES_DIR, REPORT_FILE,
};
use crate::manifest::RunRecorder;

pub const PREDICTIONS_FILE: &str = "predictions.jsonl";

#[derive(Debug, Args)]
pub struct EvalDetArgs {
    /// Checkpoint directory to run; exclusive with --predictions.
    #[arg(long, required_unless_present = "predictions", conflicts_with = "predictions")]
    pub ckpt: Option<PathBuf>,
    /// Precomputed JSONL predictions {"image_id", "box", "score", "category"}.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Detection-format ground truth (e.g. det_test.jsonl).
    #[arg(long)]
    pub data: PathBuf,
    /// `all`, `base`, `held-out`, or comma-separated category names.
    #[arg(long, default_value = "all")]
    pub categories: String,
    #[arg(long)]
    pub dictionary: Option<PathBuf>,
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Output directory; also accepted as --report.
    #[arg(long, alias = "report")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = DetectConfig::default().score_threshold)]
    pub score_threshold: f64,
    #[arg(long, default_value_t = DetectConfig::default().nms_threshold)]
    pub nms_threshold: f64,
    #[arg(long, default_value_t = DetectConfig::default().max_detections)]
    pub max_detections: usize,
}

#[derive(Debug, Args)]
pub struct EvalCapArgs {
    /// Checkpoint directory to run; exclusive with --predictions.
    #[arg(long, required_unless_present = "predictions", conflicts_with = "predictions")]
    pub ckpt: Option<PathBuf>,
    /// Precomputed JSONL predictions {"image_id", "box", "score", "caption"}.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Dense-caption ground truth (e.g. cap_test.jsonl).
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory; also accepted as --report.
    #[arg(long, alias = "report")]
    pub out: PathBuf,
    /// Class-agnostic proposals per image before NMS.
    #[arg(long, default_value_t = DenseCapConfig::default().k)]
    pub class_agnostic_k: usize,
    #[arg(long, default_value_t = DenseCapConfig::default().nms_threshold)]
    pub nms_threshold: f64,
    #[arg(long, value_enum, default_value_t = Ranking::Centerness)]
    pub ranking: Ranking,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
}

fn load_model(path: &std::path::Path) -> Result<CapDet, CliError> {
    require_file(path)?;
    Ok(checkpoint::load(path)?.0)
}

fn images(samples: &[LoadedSample]) -> Vec<&Image> {
    samples.iter().map(|s| &s.sample.image).collect()
}

pub fn run_det(a: EvalDetArgs, argv: Vec<String>) -> Result<(), CliError> {
    let rec = RunRecorder::start("eval-det", argv);
    let data = load_dataset(&a.data)?;
    let spec = load_spec(a.spec.as_deref(), Some(&a.data))?;
    let dictionary = load_dictionary(a.dictionary.as_deref(), Some(&a.data), &spec)?;
    let names = resolve_categories(&a.categories, &dictionary, &spec)?;
    let cats = CategoryList::from_dictionary(&names, &dictionary)?;
    let detect = DetectConfig {
        score_threshold: a.score_threshold,
        nms_threshold: a.nms_threshold,
        max_detections: a.max_detections,
    };
    std::fs::create_dir_all(a.out.join(CURVES_DIR))?;
    let mut outputs = vec![REPORT_FILE.to_string()];

    let predictions: Vec<Vec<(LabeledBox, f64)>> = match (&a.ckpt, &a.predictions) {
        (Some(ckpt), _) => {
            let model = load_model(ckpt)?;
            let imgs = images(&data);
            let dets = parallel_chunks(imgs.len(), a.batch_size, a.workers, |r| {
                zero_shot_detect(&model, &imgs[r], &cats, &detect)
            })?;
            let records: Vec<Record> = dets
                .iter()
                .enumerate()
                .flat_map(|(i, d)| d.iter().map(move |d| Record::from_detection(i, d)))
                .collect();
            write_records(&a.out.join(PREDICTIONS_FILE), &records)?;
            outputs.push(PREDICTIONS_FILE.to_string());
            dets.into_iter()
                .map(|d| {
                    d.into_iter()
                        .map(|d| (LabeledBox { bbox: d.bbox, category: d.label }, d.score))
                        .collect()
                })
                .collect()
        }
        (None, Some(p)) => {
            let mut per_image = vec![Vec::new(); data.len()];
            for r in read_records(p)? {
                if let (Some(cat), Some(slot)) = (r.category, per_image.get_mut(r.image_id)) {
                    slot.push((LabeledBox { bbox: r.bbox, category: cat }, r.score.unwrap_or(1.0)));
                }
            }
            per_image
        }
        (None, None) => return Err(CliError::Usage("either --ckpt or --predictions is required".into())),
    };

    let ground_truth: Vec<Vec<LabeledBox>> = data
        .iter()
        .map(|s| {
            s.sample
                .boxes
                .iter()
                .zip(&s.sample.concepts)
                .map(|(b, c)| LabeledBox {
                    bbox: *b,
                    category: category_of_concept(c).to_string(),
                })
                .filter(|g| names.contains(&g.category))
                .collect()
        })
        .collect();
    let report = detection_ap(&predictions, &ground_truth, &coco_thresholds(), &dictionary.tiers());
    write_json(&a.out.join(REPORT_FILE), &report)?;
    let curves: Vec<(String, Vec<(f64, f64)>)> =
        report.per_category.iter().map(|(k, v)| (k.clone(), v.curve50.clone())).collect();
    let curve_file = format!("{CURVES_DIR}/pr_iou50.svg");
    std::fs::write(a.out.join(&curve_file), pr_curves_svg("precision-recall at IoU 0.5", &curves))?;
    outputs.push(curve_file);
    println!("{}", serde_json::to_string(&report)?);

    let config = serde_json::json!({
        "ckpt": a.ckpt,
        "predictions": a.predictions,
        "data": a.data,
        "categories": names,
        "detect": detect,
        "workers": a.workers,
        "batch_size": a.batch_size,
    });
    rec.finish(&a.out, config, None, outputs)?;
    Ok(())
}

fn caption_text(concept: &str) -> String {
    concept.trim_end_matches('.').to_string()
}

pub fn run_cap(a: EvalCapArgs, argv: Vec<String>) -> Result<(), CliError> {
    let rec = RunRecorder::start("eval-cap", argv);
    let data = load_dataset(&a.data)?;
    let cfg = DenseCapConfig {
        k: a.class_agnostic_k,
        nms_threshold: a.nms_threshold,
        ranking: a.ranking.into(),
    };
    std::fs::create_dir_all(a.out.join(CURVES_DIR))?;
    let mut outputs = vec![REPORT_FILE.to_string()];

    let predictions: Vec<Vec<DenseCapPrediction>> = match (&a.ckpt, &a.predictions) {
        (Some(ckpt), _) => {
            let model = load_model(ckpt)?;
            let imgs = images(&data);
            let preds = parallel_chunks(imgs.len(), a.batch_size, a.workers, |r| {
                dense_caption(&model, &imgs[r], &cfg)
            })?;
            let records: Vec<Record> = preds
                .iter()
                .enumerate()
                .flat_map(|(i, p)| p.iter().map(move |p| Record::from_densecap(i, p)))
                .collect();
            write_records(&a.out.join(PREDICTIONS_FILE), &records)?;
            outputs.push(PREDICTIONS_FILE.to_string());
            preds
        }
        (None, Some(p)) => densecap_by_image(&read_records(p)?, data.len()).0,
        (None, None) => return Err(CliError::Usage("either --ckpt or --predictions is required".into())),
    };
    let ground_truth: Vec<Vec<CaptionedBox>> = data
        .iter()
        .map(|s| {
            s.sample
                .boxes
                .iter()
                .zip(&s.sample.concepts)
                .map(|(b, c)| CaptionedBox {
                    bbox: *b,
                    caption: caption_text(c),
                })
                .collect()
        })
        .collect();
    let report = densecap_map(&predictions, &ground_truth)?;
    write_json(&a.out.join(REPORT_FILE), &report)?;
    let heatmap = format!("{CURVES_DIR}/densecap_cells.svg");
    std::fs::write(
        a.out.join(&heatmap),
        heatmap_svg("AP per IoU (rows) x METEOR (columns) threshold", &report.per_cell, &report.iou_thresholds, &report.meteor_thresholds),
    )?;
    outputs.push(heatmap);
    println!("{}", serde_json::to_string(&report)?);

    let config = serde_json::json!({
        "ckpt": a.ckpt,
        "predictions": a.predictions,
        "data": a.data,
        "densecap": cfg,
        "workers": a.workers,
        "batch_size": a.batch_size,
    });
    rec.finish(&a.out, config, None, outputs)?;
    Ok(())
}
