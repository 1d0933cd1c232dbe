use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::caption::{generate_captions, top_k_desc, BACKGROUND_CONCEPT, FOREGROUND_CONCEPT};
use crate::data::{ConceptDictionary, Image};
use crate::encoders::TextEmbeddings;
use crate::error::{Error, Result};
use crate::eval::densecap::DenseCapPrediction;
use crate::eval::nms::{nms, nms_detections, Detection, DetectionKind};
use crate::geometry::BBox;
use crate::model::CapDet;
use crate::nn::ops::sigmoid_f64;

/// Category names and the concept strings they are scored against.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryList {
    pub names: Vec<String>,
    pub concepts: Vec<String>,
}

impl CategoryList {
    /// Concepts built from dictionary definitions where available, the bare name otherwise.
    pub fn from_dictionary<S: AsRef<str>>(names: &[S], dictionary: &ConceptDictionary) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Contract("category list is empty".into()));
        }
        Ok(Self {
            names: names.iter().map(|n| n.as_ref().to_string()).collect(),
            concepts: names.iter().map(|n| dictionary.concept_for(n.as_ref())).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectConfig {
    pub score_threshold: f64,
    pub nms_threshold: f64,
    pub max_detections: usize,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.05,
            nms_threshold: 0.5,
            max_detections: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalRanking {
    #[default]
    Centerness,
    /// sigmoid of the "object" column of the class-agnostic scores.
    Foreground,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TwoStageConfig {
    pub detect: DetectConfig,
    pub tau_unknown: f64,
    pub k: usize,
    pub ranking: ProposalRanking,
}

impl Default for TwoStageConfig {
    fn default() -> Self {
        Self {
            detect: DetectConfig::default(),
            tau_unknown: 0.3,
            k: 3,
            ranking: ProposalRanking::Centerness,
        }
    }
}

/// Everything inference needs from one forward pass over one image.
pub struct ImageScores {
    /// Decoded boxes, clipped to the image.
    pub boxes: Vec<BBox>,
    /// `K × M` alignment logits S.
    pub alignment: Vec<Vec<f64>>,
    /// `K × M` sigmoid(S) · sigmoid(centerness).
    pub class_scores: Vec<Vec<f64>>,
    pub centerness: Vec<f64>,
    /// `(K, D)`.
    pub region_features: Tensor,
}

fn clip(b: BBox, w: f32, h: f32) -> BBox {
    BBox::new(b.x1.clamp(0.0, w), b.y1.clamp(0.0, h), b.x2.clamp(0.0, w), b.y2.clamp(0.0, h))
}

/// One forward pass over `images`, scored against pre-encoded category embeddings.
pub fn score_images(model: &CapDet, images: &[&Image], categories: &TextEmbeddings) -> Result<Vec<ImageScores>> {
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let out = model.image.encode(images, model.dtype())?;
    let mut result = Vec::with_capacity(images.len());
    for (b, img) in images.iter().enumerate() {
        let feats = out.region_features.get(b)?;
        let s: Vec<Vec<f64>> = model.align.scores(&feats, categories)?.to_dtype(DType::F64)?.to_vec2()?;
        let ctr_logits: Vec<f64> = out.centerness_logits.get(b)?.to_dtype(DType::F64)?.to_vec1()?;
        let centerness: Vec<f64> = ctr_logits.iter().map(|&c| sigmoid_f64(c)).collect();
        let class_scores = s
            .iter()
            .zip(&centerness)
            .map(|(row, &c)| row.iter().map(|&v| sigmoid_f64(v) * c).collect())
            .collect();
        let (w, h) = (img.width() as f32, img.height() as f32);
        let boxes = out.decoded_boxes(b)?.into_iter().map(|bx| clip(bx, w, h)).collect();
        result.push(ImageScores {
            boxes,
            alignment: s,
            class_scores,
            centerness,
            region_features: feats,
        });
    }
    Ok(result)
}

/// Threshold, per-class NMS and truncation over precomputed scores.
pub fn detections_from_scores(scores: &ImageScores, categories: &CategoryList, cfg: &DetectConfig) -> Vec<Detection> {
    let mut cands = Vec::new();
    for (k, row) in scores.class_scores.iter().enumerate() {
        if !scores.boxes[k].is_valid() {
            continue;
        }
        for (m, &s) in row.iter().enumerate() {
            if s >= cfg.score_threshold {
                cands.push(Detection {
                    bbox: scores.boxes[k],
                    score: s,
                    label: categories.names[m].clone(),
                    kind: DetectionKind::Category,
                    anchor: k,
                });
            }
        }
    }
    let mut kept = nms_detections(&cands, cfg.nms_threshold, true);
    kept.truncate(cfg.max_detections);
    kept
}

pub fn encode_categories(model: &CapDet, categories: &CategoryList) -> Result<TextEmbeddings> {
    if categories.is_empty() {
        return Err(Error::Contract("category list is empty".into()));
    }
    model.text.encode_texts(&categories.concepts, &model.vocab)
}

/// Open-vocabulary detection of `categories` in each image.
pub fn zero_shot_detect(
    model: &CapDet,
    images: &[&Image],
    categories: &CategoryList,
    cfg: &DetectConfig,
) -> Result<Vec<Vec<Detection>>> {
    let text = encode_categories(model, categories)?;
    Ok(score_images(model, images, &text)?
        .iter()
        .map(|s| detections_from_scores(s, categories, cfg))
        .collect())
}

/// Known detections plus captioned "unknown" proposals for one image's scores.
///
/// Proposals are the top-`k` anchors by the ranking score, reduced by class-agnostic NMS; those
/// whose best class score is below `tau_unknown` are captioned. `foreground` holds
/// sigmoid(S') for the "object" concept and is only read under [`ProposalRanking::Foreground`].
pub fn two_stage_from_scores(
    model: &CapDet,
    scores: &ImageScores,
    categories: &CategoryList,
    foreground: Option<&[f64]>,
    cfg: &TwoStageConfig,
) -> Result<Vec<Detection>> {
    let mut out = detections_from_scores(scores, categories, &cfg.detect);
    let rank: &[f64] = match (cfg.ranking, foreground) {
        (ProposalRanking::Centerness, _) => &scores.centerness,
        (ProposalRanking::Foreground, Some(f)) => f,
        (ProposalRanking::Foreground, None) => {
            return Err(Error::Contract("foreground ranking needs class-agnostic scores".into()))
        }
    };
    let rank32: Vec<f32> = rank.iter().map(|&v| v as f32).collect();
    let mut top = top_k_desc(&rank32, cfg.k);
    top.retain(|&k| scores.boxes[k].is_valid());
    let boxes: Vec<BBox> = top.iter().map(|&k| scores.boxes[k]).collect();
    let proposal_scores: Vec<f64> = top.iter().map(|&k| rank[k]).collect();
    let unknown: Vec<usize> = nms(&boxes, &proposal_scores, cfg.detect.nms_threshold)
        .into_iter()
        .map(|i| top[i])
        .filter(|&k| scores.class_scores[k].iter().copied().fold(0.0, f64::max) < cfg.tau_unknown)
        .collect();
    if unknown.is_empty() {
        return Ok(out);
    }
    let idx = Tensor::new(unknown.iter().map(|&k| k as u32).collect::<Vec<_>>(), scores.region_features.device())?;
    let feats = scores.region_features.index_select(&idx, 0)?;
    let captions = generate_captions(&model.caption, &model.vocab, &feats, model.config.max_context)?;
    for (k, caption) in unknown.into_iter().zip(captions) {
        out.push(Detection {
            bbox: scores.boxes[k],
            score: rank[k],
            label: caption,
            kind: DetectionKind::UnknownCaption,
            anchor: k,
        });
    }
    Ok(out)
}

/// sigmoid(S') of the "object" concept for each anchor.
pub fn foreground_scores(model: &CapDet, scores: &ImageScores) -> Result<Vec<f64>> {
    let w = model
        .text
        .encode_texts(&[FOREGROUND_CONCEPT.to_string(), BACKGROUND_CONCEPT.to_string()], &model.vocab)?;
    let s: Vec<Vec<f64>> = model.align.scores(&scores.region_features, &w)?.to_dtype(DType::F64)?.to_vec2()?;
    Ok(s.iter().map(|r| sigmoid_f64(r[0])).collect())
}

/// Two-stage open-world inference: detect `categories`, then caption low-scoring proposals.
pub fn two_stage_inference(
    model: &CapDet,
    images: &[&Image],
    categories: &CategoryList,
    cfg: &TwoStageConfig,
) -> Result<Vec<Vec<Detection>>> {
    let text = encode_categories(model, categories)?;
    score_images(model, images, &text)?
        .iter()
        .map(|s| {
            let fg = match cfg.ranking {
                ProposalRanking::Foreground => Some(foreground_scores(model, s)?),
                ProposalRanking::Centerness => None,
            };
            two_stage_from_scores(model, s, categories, fg.as_deref(), cfg)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenseCapConfig {
    /// Class-agnostic proposals kept before NMS.
    pub k: usize,
    pub nms_threshold: f64,
    pub ranking: ProposalRanking,
}

impl Default for DenseCapConfig {
    fn default() -> Self {
        Self {
            k: 100,
            nms_threshold: 0.5,
            ranking: ProposalRanking::Centerness,
        }
    }
}

/// Region captions for each image: class-agnostic top-`k` proposals, NMS, one caption each.
pub fn dense_caption(model: &CapDet, images: &[&Image], cfg: &DenseCapConfig) -> Result<Vec<Vec<DenseCapPrediction>>> {
    if cfg.k == 0 {
        return Err(Error::Contract("class-agnostic k must be at least 1".into()));
    }
    let fg_bg = model
        .text
        .encode_texts(&[FOREGROUND_CONCEPT.to_string(), BACKGROUND_CONCEPT.to_string()], &model.vocab)?;
    let mut all = Vec::with_capacity(images.len());
    for s in score_images(model, images, &fg_bg)? {
        let rank: Vec<f64> = match cfg.ranking {
            ProposalRanking::Centerness => s.centerness.clone(),
            ProposalRanking::Foreground => s.alignment.iter().map(|r| sigmoid_f64(r[0])).collect(),
        };
        let rank32: Vec<f32> = rank.iter().map(|&v| v as f32).collect();
        let mut top = top_k_desc(&rank32, cfg.k);
        top.retain(|&k| s.boxes[k].is_valid());
        let boxes: Vec<BBox> = top.iter().map(|&k| s.boxes[k]).collect();
        let scores: Vec<f64> = top.iter().map(|&k| rank[k]).collect();
        let keep: Vec<usize> = nms(&boxes, &scores, cfg.nms_threshold).into_iter().map(|i| top[i]).collect();
        if keep.is_empty() {
            all.push(Vec::new());
            continue;
        }
        let idx = Tensor::new(keep.iter().map(|&k| k as u32).collect::<Vec<_>>(), s.region_features.device())?;
        let feats = s.region_features.index_select(&idx, 0)?;
        let captions = generate_captions(&model.caption, &model.vocab, &feats, model.config.max_context)?;
        all.push(
            keep.iter()
                .zip(captions)
                .filter(|(_, c)| !c.is_empty())
                .map(|(&k, caption)| DenseCapPrediction {
                    bbox: s.boxes[k],
                    score: rank[k],
                    caption,
                })
                .collect(),
        );
    }
    Ok(all)
}
