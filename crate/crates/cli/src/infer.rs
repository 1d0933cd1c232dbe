use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use capdet::data::{render_scene, Image};
use capdet::eval::{two_stage_inference, CategoryList, Detection, DetectionKind, TwoStageConfig};
use capdet::train::checkpoint;
use clap::Args;
use serde::Serialize;

use crate::common::{load_dictionary, load_spec, require_file, resolve_categories, write_json, CliError, Ranking, REPORT_FILE};
use crate::manifest::RunRecorder;

pub const SVG_FILE: &str = "detections.svg";

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// PNG or PNM image.
    #[arg(long, required_unless_present = "seed", conflicts_with = "seed")]
    pub image: Option<PathBuf>,
    /// Render the scene with this seed instead of reading an image.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Scene spec used with --seed and for category keywords.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub dictionary: Option<PathBuf>,
    /// `all`, `base`, `held-out`, or comma-separated category names.
    #[arg(long, default_value = "base")]
    pub categories: String,
    #[arg(long, default_value_t = TwoStageConfig::default().tau_unknown)]
    pub tau_unknown: f64,
    /// Class-agnostic proposals considered for unknowns.
    #[arg(long, default_value_t = TwoStageConfig::default().k)]
    pub k: usize,
    #[arg(long, value_enum, default_value_t = Ranking::Centerness)]
    pub ranking: Ranking,
    #[arg(long, default_value_t = TwoStageConfig::default().detect.score_threshold)]
    pub score_threshold: f64,
    #[arg(long, default_value_t = TwoStageConfig::default().detect.nms_threshold)]
    pub nms_threshold: f64,
    #[arg(long, default_value_t = TwoStageConfig::default().detect.max_detections)]
    pub max_detections: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Write the detections as JSON (the default when no format is chosen).
    #[arg(long)]
    pub json: bool,
    /// Draw the detections over the image as SVG.
    #[arg(long)]
    pub svg: bool,
}

#[derive(Debug, Serialize)]
struct InferReport<'a> {
    image: String,
    detections: &'a [Detection],
}

fn read_image(path: &Path) -> Result<Image, CliError> {
    require_file(path)?;
    let img = image::open(path).map_err(|e| CliError::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    Ok(Image::from_raw(h as usize, w as usize, rgb.into_raw())?)
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn overlay_svg(img: &Image, dets: &[Detection]) -> String {
    let scale = 6.0;
    let (w, h) = (img.width(), img.height());
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" font-family="sans-serif" font-size="10" shape-rendering="crispEdges">"#,
        w as f64 * scale,
        h as f64 * scale
    );
    for y in 0..h {
        for x in 0..w {
            let [r, g, b] = img.rgb(y, x);
            let _ = writeln!(
                s,
                r#"<rect x="{}" y="{}" width="{scale}" height="{scale}" fill="rgb({r},{g},{b})"/>"#,
                x as f64 * scale,
                y as f64 * scale
            );
        }
    }
    for d in dets {
        let color = match d.kind {
            DetectionKind::Category => "white",
            DetectionKind::UnknownCaption => "magenta",
        };
        let b = d.bbox.scale(scale as f32);
        let _ = writeln!(
            s,
            r#"<rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            b.x1,
            b.y1,
            b.width(),
            b.height()
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}" stroke="black" stroke-width="0.3">{} {:.2}</text>"#,
            b.x1 + 2.0,
            b.y1 + 11.0,
            esc(&d.label),
            d.score
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn run(a: InferArgs, argv: Vec<String>) -> Result<(), CliError> {
    let rec = RunRecorder::start("infer", argv);
    let spec = load_spec(a.spec.as_deref(), None)?;
    let dictionary = load_dictionary(a.dictionary.as_deref(), None, &spec)?;
    let names = resolve_categories(&a.categories, &dictionary, &spec)?;
    let cats = CategoryList::from_dictionary(&names, &dictionary)?;
    let (image, source) = match (&a.image, a.seed) {
        (Some(p), _) => (read_image(p)?, p.display().to_string()),
        (None, Some(seed)) => (render_scene(seed, &spec)?.image, format!("seed:{seed}")),
        (None, None) => return Err(CliError::Usage("either --image or --seed is required".into())),
    };
    require_file(&a.ckpt)?;
    let (model, _) = checkpoint::load(&a.ckpt)?;
    let mut cfg = TwoStageConfig {
        tau_unknown: a.tau_unknown,
        k: a.k,
        ranking: a.ranking.into(),
        ..TwoStageConfig::default()
    };
    cfg.detect.score_threshold = a.score_threshold;
    cfg.detect.nms_threshold = a.nms_threshold;
    cfg.detect.max_detections = a.max_detections;

    let dets = two_stage_inference(&model, &[&image], &cats, &cfg)?.pop().unwrap_or_default();
    std::fs::create_dir_all(&a.out)?;
    let mut outputs = Vec::new();
    if a.json || !a.svg {
        write_json(
            &a.out.join(REPORT_FILE),
            &InferReport {
                image: source.clone(),
                detections: &dets,
            },
        )?;
        outputs.push(REPORT_FILE.to_string());
    }
    if a.svg {
        std::fs::write(a.out.join(SVG_FILE), overlay_svg(&image, &dets))?;
        outputs.push(SVG_FILE.to_string());
    }
    for d in &dets {
        let kind = match d.kind {
            DetectionKind::Category => "category",
            DetectionKind::UnknownCaption => "unknown",
        };
        println!("{kind}\t{:.4}\t{}", d.score, d.label);
    }
    let config = serde_json::json!({
        "ckpt": a.ckpt,
        "image": source,
        "spec": spec,
        "dictionary": a.dictionary,
        "categories": names,
        "two_stage": cfg,
    });
    rec.finish(&a.out, config, a.seed, outputs)?;
    Ok(())
}
