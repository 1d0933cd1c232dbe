//! Checkpoint directories: `manifest.json`, `weights.safetensors`, `vocab.json`, optimizer state.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::model::{CapDet, ModelConfig};
use crate::train::config::TrainConfig;
use crate::train::optim::AdamW;

pub const MANIFEST: &str = "manifest.json";
pub const WEIGHTS: &str = "weights.safetensors";
pub const VOCAB: &str = "vocab.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub arch_hash: String,
    pub embed_dim: usize,
    pub strides: Vec<usize>,
    pub vocab_size: usize,
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    /// Epochs fully completed.
    pub epoch: usize,
    pub step: u64,
    #[serde(rename = "final")]
    pub is_final: bool,
}

pub struct TrainingState {
    pub epoch: usize,
    pub step: u64,
}

/// Write a checkpoint into `dir`, replacing any previous one there.
pub fn save(
    dir: &Path,
    model: &CapDet,
    train: Option<&TrainConfig>,
    optimizer: Option<&AdamW>,
    state: TrainingState,
    is_final: bool,
) -> Result<()> {
    let tmp = dir.with_extension("tmp");
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp)?;
    }
    std::fs::create_dir_all(&tmp)?;
    model.params.save(&tmp.join(WEIGHTS))?;
    model.vocab.save(&tmp.join(VOCAB))?;
    if let Some(opt) = optimizer {
        opt.save(&tmp)?;
    }
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        arch_hash: model.arch_hash(),
        embed_dim: model.config.embed_dim,
        strides: model.config.image.strides.clone(),
        vocab_size: model.vocab.len(),
        model: model.config.clone(),
        train: train.cloned(),
        epoch: state.epoch,
        step: state.step,
        is_final,
    };
    std::fs::write(tmp.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    if dir.exists() {
        std::fs::remove_dir_all(dir)?;
    }
    std::fs::rename(&tmp, dir)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Dataset {
        path: path.clone(),
        reason: format!("cannot read checkpoint manifest: {e}"),
    })?;
    let m: CheckpointManifest = serde_json::from_str(&text)?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::ArchMismatch(format!("unsupported checkpoint format {}", m.format_version)));
    }
    Ok(m)
}

/// Rebuild the model described by the manifest and load its weights.
pub fn load(dir: &Path) -> Result<(CapDet, CheckpointManifest)> {
    let manifest = read_manifest(dir)?;
    let vocab = Vocab::load(&dir.join(VOCAB))?;
    let model = CapDet::new(manifest.model.clone(), vocab, 0)?;
    load_into(&model, dir)?;
    Ok((model, manifest))
}

/// Load weights into an existing model; refuses when the architecture differs.
pub fn load_into(model: &CapDet, dir: &Path) -> Result<CheckpointManifest> {
    let manifest = read_manifest(dir)?;
    if manifest.embed_dim != model.config.embed_dim {
        return Err(Error::ArchMismatch(format!(
            "checkpoint D={} but model D={}",
            manifest.embed_dim, model.config.embed_dim
        )));
    }
    if manifest.vocab_size != model.vocab.len() {
        return Err(Error::ArchMismatch(format!(
            "checkpoint vocabulary has {} tokens, model has {}",
            manifest.vocab_size,
            model.vocab.len()
        )));
    }
    if manifest.arch_hash != model.arch_hash() {
        return Err(Error::ArchMismatch("architecture hash differs".into()));
    }
    model.params.load(&dir.join(WEIGHTS))?;
    Ok(manifest)
}
