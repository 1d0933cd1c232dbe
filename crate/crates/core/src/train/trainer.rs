//! The joint training loop.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::caption::{caption_lm_loss, total_loss, CaptionLoss};
use crate::data::tokenizer::TokenSeq;
use crate::data::{batch_concepts, ConceptDictionary, ConceptSet, Source, UnifiedSample};
use crate::error::{Error, Result};
use crate::losses::{detection_loss, DetectionLoss, SampleTargets};
use crate::model::{build_vocab, CapDet};
use crate::train::checkpoint::{self, TrainingState};
use crate::train::config::{BatchMix, TrainConfig};
use crate::train::optim::{AdamW, AdamWConfig, GroupLrs};

/// SplitMix64 finalizer over `(seed, a, b)`.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TAG_ORDER: u64 = 1;
const TAG_NEGATIVES: u64 = 2;

/// Training samples from both sources plus the concept dictionary.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub det: Vec<UnifiedSample>,
    pub cap: Vec<UnifiedSample>,
    pub dictionary: ConceptDictionary,
}

impl TrainData {
    pub fn validate(&self) -> Result<()> {
        for (name, set, source) in [("detection", &self.det, Source::Detection), ("dense-caption", &self.cap, Source::DenseCaption)] {
            for (i, s) in set.iter().enumerate() {
                s.validate()
                    .map_err(|e| Error::InvalidSample(format!("{name} sample {i}: {e}")))?;
                if s.source != source {
                    return Err(Error::InvalidSample(format!("{name} sample {i} has source {:?}", s.source)));
                }
            }
        }
        if self.det.is_empty() && self.cap.is_empty() {
            return Err(Error::InvalidSample("no training samples".into()));
        }
        Ok(())
    }

    /// Dictionary entries seen in detection training; the pool negatives are drawn from.
    pub fn negative_pool(&self) -> ConceptDictionary {
        let names: Vec<String> = self
            .dictionary
            .entries()
            .filter(|(_, e)| e.frequency > 0)
            .map(|(n, _)| n.to_string())
            .collect();
        self.dictionary.restricted_to(names.iter().map(String::as_str))
    }

    pub fn sample(&self, source: Source, i: usize) -> &UnifiedSample {
        match source {
            Source::Detection => &self.det[i],
            Source::DenseCaption => &self.cap[i],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub id: String,
    pub items: Vec<(Source, usize)>,
}

impl BatchPlan {
    pub fn source_label(&self) -> &'static str {
        let det = self.items.iter().filter(|(s, _)| *s == Source::Detection).count();
        if det == self.items.len() {
            "detection"
        } else if det == 0 {
            "dense_caption"
        } else {
            "mixed"
        }
    }
}

/// Deterministic batch order for one epoch.
pub fn plan_epoch(n_det: usize, n_cap: usize, batch: usize, mix: BatchMix, seed: u64, epoch: usize) -> Vec<BatchPlan> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_ORDER, epoch as u64));
    let mut det: Vec<(Source, usize)> = (0..n_det).map(|i| (Source::Detection, i)).collect();
    let mut cap: Vec<(Source, usize)> = (0..n_cap).map(|i| (Source::DenseCaption, i)).collect();
    let chunks: Vec<Vec<(Source, usize)>> = match mix {
        BatchMix::Alternate => {
            det.shuffle(&mut rng);
            cap.shuffle(&mut rng);
            let d: Vec<_> = det.chunks(batch).map(<[_]>::to_vec).collect();
            let c: Vec<_> = cap.chunks(batch).map(<[_]>::to_vec).collect();
            let mut out = Vec::with_capacity(d.len() + c.len());
            let (mut di, mut ci) = (d.into_iter(), c.into_iter());
            loop {
                match (di.next(), ci.next()) {
                    (None, None) => break,
                    (a, b) => out.extend(a.into_iter().chain(b)),
                }
            }
            out
        }
        BatchMix::Interleaved => {
            det.extend(cap);
            det.shuffle(&mut rng);
            det.chunks(batch).map(<[_]>::to_vec).collect()
        }
    };
    chunks
        .into_iter()
        .enumerate()
        .map(|(i, items)| BatchPlan {
            id: format!("e{epoch}b{i}"),
            items,
        })
        .collect()
}

/// Forward-pass losses of one batch.
pub struct BatchLosses {
    pub concepts: ConceptSet,
    pub detection: DetectionLoss,
    pub caption: Option<CaptionLoss>,
    pub total: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub kind: String,
    pub step: u64,
    pub epoch: usize,
    pub batch: String,
    pub source: String,
    #[serde(rename = "L_align")]
    pub l_align: f64,
    #[serde(rename = "L_reg")]
    pub l_reg: f64,
    #[serde(rename = "L_center")]
    pub l_center: f64,
    /// `None` when no caption loss was computed for the batch.
    #[serde(rename = "L_cap")]
    pub l_cap: Option<f64>,
    pub total: f64,
    pub m: usize,
    pub lr_image: f64,
    pub lr_text: f64,
    pub lr_caption: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub kind: String,
    pub epoch: usize,
    pub steps: usize,
    #[serde(rename = "L_align")]
    pub l_align: f64,
    #[serde(rename = "L_reg")]
    pub l_reg: f64,
    #[serde(rename = "L_center")]
    pub l_center: f64,
    #[serde(rename = "L_cap")]
    pub l_cap: Option<f64>,
    pub total: f64,
    pub lr_image: f64,
    pub peak_lr_image: f64,
    pub peak_lr_text: f64,
    pub peak_lr_caption: f64,
}

pub struct Trainer {
    pub model: CapDet,
    pub config: TrainConfig,
    optimizer: AdamW,
    negative_pool: ConceptDictionary,
    tokens: HashMap<String, TokenSeq>,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Next epoch to run.
    pub epoch: usize,
}

fn adamw_config(cfg: &TrainConfig) -> AdamWConfig {
    AdamWConfig {
        beta1: cfg.betas.0,
        beta2: cfg.betas.1,
        eps: cfg.adam_eps,
        weight_decay: cfg.weight_decay,
    }
}

impl Trainer {
    pub fn new(config: TrainConfig, data: &TrainData) -> Result<Self> {
        let vocab = build_vocab(
            &data.dictionary,
            data.cap.iter().flat_map(|s| s.concepts.iter().map(String::as_str)),
        );
        let model = CapDet::new(config.model.clone(), vocab, config.seed)?;
        let optimizer = AdamW::new(adamw_config(&config));
        Ok(Self::assemble(model, config, data, optimizer, 0, 0))
    }

    /// Continue from a checkpoint written by [`fit`].
    pub fn resume(config: TrainConfig, data: &TrainData, dir: &Path) -> Result<Self> {
        let (model, manifest) = checkpoint::load(dir)?;
        if manifest.model != config.model {
            return Err(Error::ArchMismatch("checkpoint model config differs from the training config".into()));
        }
        let optimizer = AdamW::load(dir, &model.params)?;
        Ok(Self::assemble(model, config, data, optimizer, manifest.step, manifest.epoch))
    }

    fn assemble(model: CapDet, config: TrainConfig, data: &TrainData, optimizer: AdamW, step: u64, epoch: usize) -> Self {
        let mut tokens = HashMap::new();
        let all = data
            .det
            .iter()
            .chain(&data.cap)
            .flat_map(|s| s.concepts.iter().cloned())
            .chain(data.dictionary.concepts());
        for c in all {
            if let std::collections::hash_map::Entry::Vacant(e) = tokens.entry(c) {
                let t = model.vocab.tokenize(e.key(), config.max_context);
                e.insert(t);
            }
        }
        Self {
            negative_pool: data.negative_pool(),
            model,
            config,
            optimizer,
            tokens,
            step,
            epoch,
        }
    }

    fn tokens_for(&self, concepts: &[String]) -> Vec<TokenSeq> {
        concepts
            .iter()
            .map(|c| match self.tokens.get(c) {
                Some(t) => t.clone(),
                None => self.model.vocab.tokenize(c, self.config.max_context),
            })
            .collect()
    }

    /// Losses of a batch under the negatives drawn for optimizer step `step`.
    pub fn compute_losses(&self, batch: &[&UnifiedSample], step: u64) -> Result<BatchLosses> {
        let model = &self.model;
        let dtype = model.dtype();
        let per_sample: Vec<&[String]> = batch.iter().map(|s| s.concepts.as_slice()).collect();
        let (concepts, index) = batch_concepts(
            &per_sample,
            &self.negative_pool,
            self.config.target_m,
            derive_seed(self.config.seed, TAG_NEGATIVES, step),
        )?;
        let images: Vec<_> = batch.iter().map(|s| &s.image).collect();
        let regions = model.image.encode(&images, dtype)?;
        let texts = model.text.encode_tokens(&self.tokens_for(concepts.concepts()))?;
        let scores = model.align.scores(&regions.region_features, &texts)?;
        let m = concepts.m();
        let targets = batch
            .iter()
            .zip(&index)
            .map(|(s, idx)| {
                SampleTargets::build(s.source, &regions.anchors, &s.boxes, idx, m, model.config.topk_per_level)
            })
            .collect::<Result<Vec<_>>>()?;
        let weights = &self.config.weights;
        let detection = detection_loss(&regions, &scores, &targets, weights)?;

        let caption = if weights.w_c > 0.0 {
            let k = regions.k();
            let mut rows = Vec::new();
            let mut caps = Vec::new();
            for (b, (s, t)) in batch.iter().zip(&targets).enumerate() {
                if s.source != Source::DenseCaption {
                    continue;
                }
                for (g, anchor) in t.caption_anchor.iter().enumerate() {
                    if let Some(a) = anchor {
                        rows.push((b * k + a) as u32);
                        caps.push(s.concepts[g].clone());
                    }
                }
            }
            let d = model.config.embed_dim;
            let features = if rows.is_empty() {
                Tensor::zeros((0, d), dtype, &Device::Cpu)?
            } else {
                let idx = Tensor::from_vec(rows.clone(), rows.len(), &Device::Cpu)?;
                regions.region_features.reshape((batch.len() * k, d))?.index_select(&idx, 0)?
            };
            Some(caption_lm_loss(&model.caption, &features, &self.tokens_for(&caps))?)
        } else {
            None
        };
        let zero = Tensor::zeros((), dtype, &Device::Cpu)?;
        let l_cap = caption.as_ref().map(|c| &c.loss).unwrap_or(&zero);
        let total = total_loss(&detection.total, l_cap, weights)?;
        Ok(BatchLosses {
            concepts,
            detection,
            caption,
            total,
        })
    }

    /// Learning rates in effect for the next step of `epoch`.
    pub fn lrs(&self, epoch: usize) -> GroupLrs {
        let f = self.config.lr_factor(self.step, epoch);
        let [i, t, c] = self.config.peak_lrs();
        GroupLrs {
            image: i * f,
            text: t * f,
            caption: c * f,
        }
    }

    /// One optimizer update.
    pub fn train_step(&mut self, batch: &[&UnifiedSample], batch_id: &str, epoch: usize) -> Result<StepRecord> {
        let losses = self.compute_losses(batch, self.step)?;
        let b = losses.detection.breakdown()?;
        let l_cap = match &losses.caption {
            Some(c) if !c.skipped => Some(c.loss.to_dtype(DType::F64)?.to_scalar::<f64>()?),
            _ => None,
        };
        let total: f64 = losses.total.to_dtype(DType::F64)?.to_scalar()?;
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                batch_id: batch_id.to_string(),
                detail: format!(
                    "L_align={} L_reg={} L_center={} L_cap={:?}",
                    b.align, b.reg, b.center, l_cap
                ),
            });
        }
        let grads = losses.total.backward()?;
        let lrs = self.lrs(epoch);
        self.optimizer.step(&self.model.params, &grads, lrs)?;
        let source = if batch.iter().all(|s| s.source == Source::Detection) {
            "detection"
        } else if batch.iter().all(|s| s.source == Source::DenseCaption) {
            "dense_caption"
        } else {
            "mixed"
        };
        let record = StepRecord {
            kind: "step".into(),
            step: self.step,
            epoch,
            batch: batch_id.to_string(),
            source: source.into(),
            l_align: b.align,
            l_reg: b.reg,
            l_center: b.center,
            l_cap,
            total,
            m: losses.concepts.m(),
            lr_image: lrs.image,
            lr_text: lrs.text,
            lr_caption: lrs.caption,
        };
        self.step += 1;
        Ok(record)
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.optimizer
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub steps: u64,
    pub epochs_completed: usize,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "checkpoint";
pub const LAST_CHECKPOINT: &str = "checkpoint_last";

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Train for `config.epochs` epochs (or until `max_steps`), writing metrics and checkpoints under `out`.
pub fn fit(data: &TrainData, config: &TrainConfig, out: &Path, resume: Option<&Path>) -> Result<FitOutcome> {
    config.validate()?;
    data.validate()?;
    std::fs::create_dir_all(out)?;
    let mut trainer = match resume {
        Some(dir) => Trainer::resume(config.clone(), data, dir)?,
        None => Trainer::new(config.clone(), data)?,
    };
    let metrics_path = out.join(METRICS_FILE);
    let file = if resume.is_some() {
        OpenOptions::new().create(true).append(true).open(&metrics_path)?
    } else {
        File::create(&metrics_path)?
    };
    let mut metrics = BufWriter::new(file);
    let limit = config.max_steps.unwrap_or(u64::MAX);

    while trainer.epoch < config.epochs && trainer.step < limit {
        let epoch = trainer.epoch;
        let plan = plan_epoch(data.det.len(), data.cap.len(), config.batch_size, config.batch_mix, config.seed, epoch);
        let mut recs: Vec<StepRecord> = Vec::with_capacity(plan.len());
        for bp in &plan {
            if trainer.step >= limit {
                break;
            }
            let batch: Vec<&UnifiedSample> = bp.items.iter().map(|&(s, i)| data.sample(s, i)).collect();
            let rec = match trainer.train_step(&batch, &bp.id, epoch) {
                Ok(r) => r,
                Err(e @ Error::NonFiniteLoss { .. }) => {
                    metrics.flush()?;
                    let dump = serde_json::json!({
                        "error": e.to_string(),
                        "batch": bp,
                    });
                    std::fs::write(out.join("nonfinite_batch.json"), serde_json::to_string_pretty(&dump)? + "\n")?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            serde_json::to_writer(&mut metrics, &rec)?;
            metrics.write_all(b"\n")?;
            recs.push(rec);
        }
        let complete = recs.len() == plan.len();
        let caps: Vec<f64> = recs.iter().filter_map(|r| r.l_cap).collect();
        let [pi, pt, pc] = config.peak_lrs();
        let er = EpochRecord {
            kind: "epoch".into(),
            epoch,
            steps: recs.len(),
            l_align: mean(&recs.iter().map(|r| r.l_align).collect::<Vec<_>>()),
            l_reg: mean(&recs.iter().map(|r| r.l_reg).collect::<Vec<_>>()),
            l_center: mean(&recs.iter().map(|r| r.l_center).collect::<Vec<_>>()),
            l_cap: (!caps.is_empty()).then(|| mean(&caps)),
            total: mean(&recs.iter().map(|r| r.total).collect::<Vec<_>>()),
            lr_image: pi * config.lr_factor(trainer.step, epoch),
            peak_lr_image: pi,
            peak_lr_text: pt,
            peak_lr_caption: pc,
        };
        serde_json::to_writer(&mut metrics, &er)?;
        metrics.write_all(b"\n")?;
        metrics.flush()?;
        if complete {
            trainer.epoch = epoch + 1;
        }
        let name = if config.keep_epoch_checkpoints {
            format!("checkpoint_epoch{epoch}")
        } else {
            LAST_CHECKPOINT.to_string()
        };
        checkpoint::save(
            &out.join(name),
            &trainer.model,
            Some(config),
            Some(trainer.optimizer()),
            TrainingState {
                epoch: trainer.epoch,
                step: trainer.step,
            },
            false,
        )?;
        if !complete {
            break;
        }
    }
    let ckpt = out.join(FINAL_CHECKPOINT);
    checkpoint::save(
        &ckpt,
        &trainer.model,
        Some(config),
        Some(trainer.optimizer()),
        TrainingState {
            epoch: trainer.epoch,
            step: trainer.step,
        },
        true,
    )?;
    Ok(FitOutcome {
        checkpoint: ckpt,
        metrics: metrics_path,
        steps: trainer.step,
        epochs_completed: trainer.epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alternate_plan_covers_everything_once() {
        let p = plan_epoch(10, 7, 4, BatchMix::Alternate, 3, 0);
        let mut seen: Vec<(Source, usize)> = p.iter().flat_map(|b| b.items.clone()).collect();
        seen.sort_by_key(|&(s, i)| (s == Source::DenseCaption, i));
        assert_eq!(seen.len(), 17);
        assert_eq!(p[0].source_label(), "detection");
        assert_eq!(p[1].source_label(), "dense_caption");
        assert_eq!(p, plan_epoch(10, 7, 4, BatchMix::Alternate, 3, 0));
        assert_ne!(p, plan_epoch(10, 7, 4, BatchMix::Alternate, 3, 1));
    }
}
