use std::path::PathBuf;

use capdet::train::trainer::{FINAL_CHECKPOINT, LAST_CHECKPOINT, METRICS_FILE};
use capdet::train::{fit, TrainConfig, TrainData};
use clap::Args;

use crate::common::{load_dataset, load_dictionary, load_spec, require_file, CliError};
use crate::manifest::RunRecorder;

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training config JSON; every missing field takes its desk-scale default.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub det_data: PathBuf,
    #[arg(long)]
    pub cap_data: PathBuf,
    /// Concept dictionary; defaults to `dictionary.json` next to the detection data.
    #[arg(long)]
    pub dictionary: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Caption loss weight w_c.
    #[arg(long)]
    pub w_c: Option<f64>,
    #[arg(long)]
    pub max_steps: Option<u64>,
}

impl TrainArgs {
    /// Config file (or defaults) with command-line overrides applied.
    pub fn resolve_config(&self) -> Result<TrainConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => {
                require_file(p)?;
                TrainConfig::from_json_file(p)?
            }
            None => TrainConfig::desk(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        if let Some(w) = self.w_c {
            cfg.weights.w_c = w;
        }
        if self.max_steps.is_some() {
            cfg.max_steps = self.max_steps;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn run(a: TrainArgs, argv: Vec<String>) -> Result<(), CliError> {
    let rec = RunRecorder::start("train", argv);
    let cfg = a.resolve_config()?;
    let det = load_dataset(&a.det_data)?;
    let cap = load_dataset(&a.cap_data)?;
    let spec = load_spec(None, Some(&a.det_data))?;
    let dictionary = load_dictionary(a.dictionary.as_deref(), Some(&a.det_data), &spec)?;
    let data = TrainData {
        det: det.into_iter().map(|s| s.sample).collect(),
        cap: cap.into_iter().map(|s| s.sample).collect(),
        dictionary,
    };
    data.validate()?;
    if let Some(r) = &a.resume {
        require_file(r)?;
    }
    let [pi, pt, pc] = cfg.peak_lrs();
    eprintln!("effective peak lr: image {pi:.3e} text {pt:.3e} caption {pc:.3e}");
    let outcome = fit(&data, &cfg, &a.out, a.resume.as_deref())?;
    eprintln!("trained {} steps over {} epochs", outcome.steps, outcome.epochs_completed);
    let mut outputs = vec![METRICS_FILE.to_string(), FINAL_CHECKPOINT.to_string()];
    if a.out.join(LAST_CHECKPOINT).exists() {
        outputs.push(LAST_CHECKPOINT.to_string());
    }
    let config = serde_json::json!({
        "train": cfg,
        "det_data": a.det_data,
        "cap_data": a.cap_data,
        "dictionary": a.dictionary,
        "resume": a.resume,
    });
    rec.finish(&a.out, config, Some(cfg.seed), outputs)?;
    Ok(())
}
