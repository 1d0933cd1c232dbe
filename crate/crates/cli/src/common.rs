use std::path::{Path, PathBuf};

use capdet::data::dataset::{registry_for, SPEC_FILE};
use capdet::data::{load_jsonl, ConceptDictionary, LoadedSample, SceneSpec};
use clap::ValueEnum;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] capdet::Error),
    #[error("{0}")]
    Usage(String),
    #[error("image {path}: {reason}")]
    Image { path: PathBuf, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Usage(_) => "usage",
            CliError::Image { .. } => "image",
            CliError::Io(_) => "io",
            CliError::Json(_) => "json",
        }
    }
}

pub const DICTIONARY_FILE: &str = "dictionary.json";
pub const REPORT_FILE: &str = "report.json";
pub const CURVES_DIR: &str = "curves";

pub fn require_file(path: &Path) -> Result<(), CliError> {
    if path.is_file() || path.is_dir() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{} does not exist", path.display())))
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Full scene spec from `explicit`, else from the `scene_specs.json` next to `data`, else the default.
pub fn load_spec(explicit: Option<&Path>, data: Option<&Path>) -> Result<SceneSpec, CliError> {
    if let Some(p) = explicit {
        require_file(p)?;
        return Ok(serde_json::from_str(&std::fs::read_to_string(p)?)?);
    }
    if let Some(p) = data.and_then(Path::parent).map(|d| d.join(SPEC_FILE)) {
        if p.exists() {
            let specs: Vec<SceneSpec> = serde_json::from_str(&std::fs::read_to_string(&p)?)?;
            if let Some(full) = specs.into_iter().find(|s| s.include_held_out) {
                return Ok(full);
            }
        }
    }
    Ok(SceneSpec::default())
}

/// `explicit`, else `dictionary.json` next to `data`, else the spec's own dictionary.
pub fn load_dictionary(explicit: Option<&Path>, data: Option<&Path>, spec: &SceneSpec) -> Result<ConceptDictionary, CliError> {
    if let Some(p) = explicit {
        require_file(p)?;
        return Ok(ConceptDictionary::load(p)?);
    }
    if let Some(p) = data.and_then(Path::parent).map(|d| d.join(DICTIONARY_FILE)) {
        if p.exists() {
            return Ok(ConceptDictionary::load(&p)?);
        }
    }
    Ok(spec.dictionary(true))
}

pub fn load_dataset(path: &Path) -> Result<Vec<LoadedSample>, CliError> {
    require_file(path)?;
    Ok(load_jsonl(path, &registry_for(path)?)?)
}

/// `all`, `base`, `held-out`, or a comma-separated list of category names.
pub fn resolve_categories(arg: &str, dictionary: &ConceptDictionary, spec: &SceneSpec) -> Result<Vec<String>, CliError> {
    let held = spec.held_out_categories();
    let names: Vec<String> = match arg.trim() {
        "all" => dictionary.names().map(str::to_string).collect(),
        "base" => dictionary.names().filter(|n| !held.iter().any(|h| h == n)).map(str::to_string).collect(),
        "held-out" => dictionary.names().filter(|n| held.iter().any(|h| h == n)).map(str::to_string).collect(),
        list => list.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
    };
    if names.is_empty() {
        return Err(CliError::Usage(format!("category selection {arg:?} is empty")));
    }
    Ok(names)
}

/// Category name of a `"category, definition."` concept.
pub fn category_of_concept(concept: &str) -> &str {
    concept.split_once(", ").map_or(concept.trim_end_matches('.'), |(c, _)| c)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Ranking {
    Centerness,
    Foreground,
}

impl From<Ranking> for capdet::eval::ProposalRanking {
    fn from(r: Ranking) -> Self {
        match r {
            Ranking::Centerness => capdet::eval::ProposalRanking::Centerness,
            Ranking::Foreground => capdet::eval::ProposalRanking::Foreground,
        }
    }
}
