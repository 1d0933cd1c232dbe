use std::path::PathBuf;

use capdet::data::Corpus;
use clap::Args;

use crate::common::{load_spec, CliError};
use crate::manifest::RunRecorder;

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Scene spec JSON; the built-in spec when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Scenes per training source.
    #[arg(long, default_value_t = 1000)]
    pub count: usize,
    /// Scenes in each of the validation and test splits.
    #[arg(long, default_value_t = 100)]
    pub eval_count: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Store pixels in the records instead of scene seeds.
    #[arg(long)]
    pub inline_images: bool,
}

pub fn run(a: GenDataArgs, argv: Vec<String>) -> Result<(), CliError> {
    let rec = RunRecorder::start("gen-data", argv);
    let spec = load_spec(a.spec.as_deref(), None)?;
    let corpus = Corpus::generate(&spec, a.count, a.eval_count, a.seed)?;
    let written = corpus.write(&a.out, a.inline_images)?;
    let outputs = written
        .iter()
        .filter_map(|p| p.file_name())
        .map(|n| n.to_string_lossy().into_owned())
        .collect();
    let config = serde_json::json!({
        "spec": spec,
        "count": a.count,
        "eval_count": a.eval_count,
        "inline_images": a.inline_images,
    });
    rec.finish(&a.out, config, Some(a.seed), outputs)?;
    Ok(())
}
