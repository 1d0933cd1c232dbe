//! Region-conditioned caption decoder, its language-model loss, and the class-agnostic transform.

use candle_core::{DType, Device, Tensor, Var, D};
use serde::{Deserialize, Serialize};

use crate::data::tokenizer::{TokenSeq, BOS, EOS, PAD};
use crate::data::Vocab;
use crate::encoders::{AlignHead, RegionOutputs, TextEmbeddings, TextEncoder};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::nn::{ops, Embedding, Group, Init, Linear, ParamStore, Transformer, TransformerConfig};

/// Fixed concepts of the class-agnostic transform.
pub const FOREGROUND_CONCEPT: &str = "object";
pub const BACKGROUND_CONCEPT: &str = "background";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionDecoderConfig {
    pub transformer: TransformerConfig,
    pub max_context: usize,
    pub embed_dim: usize,
}

impl Default for CaptionDecoderConfig {
    fn default() -> Self {
        Self {
            transformer: TransformerConfig {
                width: 128,
                layers: 2,
                heads: 4,
                mlp_ratio: 2,
            },
            max_context: crate::data::tokenizer::DEFAULT_MAX_CONTEXT,
            embed_dim: 64,
        }
    }
}

/// Causal decoder whose first input position is a projection of the region feature.
#[derive(Debug, Clone)]
pub struct CaptionDecoder {
    cfg: CaptionDecoderConfig,
    prefix: Linear,
    tokens: Embedding,
    positions: Var,
    transformer: Transformer,
    lm_head: Linear,
}

impl CaptionDecoder {
    pub fn new(ps: &mut ParamStore, cfg: CaptionDecoderConfig, vocab_size: usize) -> Result<Self> {
        let w = cfg.transformer.width;
        let g = Group::Caption;
        Ok(Self {
            prefix: Linear::new(ps, "caption.prefix", cfg.embed_dim, w, g)?,
            tokens: Embedding::new(ps, "caption.tokens", vocab_size, w, g)?,
            positions: ps.create("caption.positions", &[cfg.max_context, w], Init::Normal(0.01), g)?,
            transformer: Transformer::new(ps, "caption.transformer", cfg.transformer, g)?,
            lm_head: Linear::new(ps, "caption.lm_head", w, vocab_size, g)?,
            cfg,
        })
    }

    pub fn config(&self) -> &CaptionDecoderConfig {
        &self.cfg
    }

    pub fn lm_head(&self) -> &Linear {
        &self.lm_head
    }

    /// Logits `(C, 1 + L, V)` for region features `(C, D)` followed by token inputs `(C, L)`.
    pub fn logits(&self, features: &Tensor, ids: &Tensor) -> Result<Tensor> {
        let (c, l) = ids.dims2()?;
        if 1 + l > self.cfg.max_context {
            return Err(Error::Shape(format!("decoder input {} exceeds context {}", 1 + l, self.cfg.max_context)));
        }
        let prefix = self.prefix.forward(features)?.unsqueeze(1)?;
        let x = if l == 0 {
            prefix
        } else {
            Tensor::cat(&[&prefix, &self.tokens.forward(ids)?], 1)?
        };
        let x = x.broadcast_add(&self.positions.as_tensor().narrow(0, 0, 1 + l)?)?;
        let (_, _, w) = x.dims3()?;
        debug_assert_eq!(x.dims()[0], c);
        self.lm_head.forward(&self.transformer.forward(&x)?.reshape((c, 1 + l, w))?)
    }

    /// Greedy decoding from BOS for each row of `(R, D)`; returns token ids without BOS/EOS.
    pub fn generate_ids(&self, features: &Tensor, max_len: usize) -> Result<Vec<Vec<u32>>> {
        let r = features.dims2()?.0;
        let max_len = max_len.min(self.cfg.max_context.saturating_sub(2));
        let mut seqs: Vec<Vec<u32>> = vec![vec![BOS]; r];
        let mut done = vec![false; r];
        for _ in 0..max_len {
            if done.iter().all(|&d| d) {
                break;
            }
            let l = seqs[0].len();
            let flat: Vec<u32> = seqs.iter().flatten().copied().collect();
            let ids = Tensor::from_vec(flat, (r, l), &Device::Cpu)?;
            let logits = self.logits(features, &ids)?.narrow(1, l, 1)?.squeeze(1)?;
            let rows: Vec<Vec<f32>> = logits.to_dtype(DType::F32)?.to_vec2()?;
            for (i, row) in rows.iter().enumerate() {
                let next = if done[i] { PAD } else { argmax(row) };
                if next == EOS {
                    done[i] = true;
                }
                seqs[i].push(next);
            }
        }
        Ok(seqs
            .into_iter()
            .map(|s| s[1..].iter().copied().take_while(|&t| t != EOS && t != PAD).collect())
            .collect())
    }
}

fn argmax(row: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

/// Greedy caption for one region feature (`D` or `1 × D`).
pub fn generate_caption(decoder: &CaptionDecoder, vocab: &Vocab, feature: &Tensor, max_len: usize) -> Result<String> {
    let f = if feature.rank() == 1 { feature.unsqueeze(0)? } else { feature.clone() };
    let ids = decoder.generate_ids(&f, max_len)?;
    Ok(vocab.detokenize(&ids[0]))
}

/// Batched greedy captions for `(R, D)` region features.
pub fn generate_captions(decoder: &CaptionDecoder, vocab: &Vocab, features: &Tensor, max_len: usize) -> Result<Vec<String>> {
    if features.dims2()?.0 == 0 {
        return Ok(Vec::new());
    }
    Ok(decoder
        .generate_ids(features, max_len)?
        .iter()
        .map(|ids| vocab.detokenize(ids))
        .collect())
}

pub struct CaptionLoss {
    pub loss: Tensor,
    /// No caption had a region to condition on.
    pub skipped: bool,
}

/// Teacher-forced inputs `[BOS, w1..wn]` and targets `[w1..wn, EOS]`, padded, plus per-position weights
/// `1 / (n_c · C)` on valid targets.
pub fn teacher_forcing_batch(captions: &[TokenSeq]) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let c = captions.len();
    let l = captions.iter().map(|s| s.len().saturating_sub(1)).max().unwrap_or(0).max(1);
    let mut inputs = vec![PAD; c * l];
    let mut targets = vec![PAD; c * l];
    let mut weights = vec![0f64; c * l];
    for (i, s) in captions.iter().enumerate() {
        if s.len() < 2 {
            return Err(Error::Contract("caption token sequence shorter than BOS+EOS".into()));
        }
        let n = s.len() - 1;
        inputs[i * l..i * l + n].copy_from_slice(&s.ids[..n]);
        targets[i * l..i * l + n].copy_from_slice(&s.ids[1..]);
        for w in &mut weights[i * l..i * l + n] {
            *w = 1.0 / (n as f64 * c as f64);
        }
    }
    let dev = Device::Cpu;
    Ok((
        Tensor::from_vec(inputs, (c, l), &dev)?,
        Tensor::from_vec(targets, (c, l), &dev)?,
        weights,
    ))
}

/// Mean token negative log-likelihood per caption, averaged over captions.
pub fn caption_lm_loss(decoder: &CaptionDecoder, features: &Tensor, captions: &[TokenSeq]) -> Result<CaptionLoss> {
    let dtype = features.dtype();
    if captions.is_empty() {
        return Ok(CaptionLoss {
            loss: Tensor::zeros((), dtype, &Device::Cpu)?,
            skipped: true,
        });
    }
    if features.dims2()?.0 != captions.len() {
        return Err(Error::Shape(format!(
            "{} region features for {} captions",
            features.dims()[0],
            captions.len()
        )));
    }
    let (inputs, targets, weights) = teacher_forcing_batch(captions)?;
    let (c, l) = inputs.dims2()?;
    let logits = decoder.logits(features, &inputs)?.narrow(1, 1, l)?;
    let logp = ops::log_softmax_last(&logits)?;
    let picked = logp.gather(&targets.unsqueeze(D::Minus1)?, D::Minus1)?.squeeze(D::Minus1)?;
    let w = Tensor::from_vec(weights, (c, l), &Device::Cpu)?.to_dtype(dtype)?;
    Ok(CaptionLoss {
        loss: (picked * w)?.sum_all()?.neg()?,
        skipped: false,
    })
}

/// `w_d · L_det + w_c · L_cap`.
pub fn total_loss(l_det: &Tensor, l_cap: &Tensor, weights: &LossWeights) -> Result<Tensor> {
    Ok(((l_det * weights.w_d)? + (l_cap * weights.w_c)?)?)
}

pub fn total_loss_scalar(l_det: f64, l_cap: f64, weights: &LossWeights) -> f64 {
    weights.w_d * l_det + weights.w_c * l_cap
}

#[derive(Debug, Clone)]
pub struct ClassAgnosticResult {
    /// `(2, D)`: foreground then background.
    pub fg_bg_embeddings: Tensor,
    /// `(K, 2)`.
    pub scores: Tensor,
    /// Anchor indices by descending centerness.
    pub selected: Vec<usize>,
}

/// Indices of the `k` largest values, descending, lower index first on ties.
pub fn top_k_desc(values: &[f32], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Encode "object"/"background", score every anchor of image `b` against them, and keep the
/// top-`k` anchors by centerness.
pub fn class_agnostic_proposals(
    regions: &RegionOutputs,
    b: usize,
    text: &TextEncoder,
    vocab: &Vocab,
    align: &AlignHead,
    k: usize,
) -> Result<ClassAgnosticResult> {
    if k == 0 {
        return Err(Error::Contract("class-agnostic k must be at least 1".into()));
    }
    let w: TextEmbeddings = text.encode_texts(&[FOREGROUND_CONCEPT.to_string(), BACKGROUND_CONCEPT.to_string()], vocab)?;
    let scores = align.scores(&regions.region_features.get(b)?, &w)?;
    let ctr: Vec<f32> = ops::sigmoid(&regions.centerness_logits.get(b)?)?.to_dtype(DType::F32)?.to_vec1()?;
    Ok(ClassAgnosticResult {
        fg_bg_embeddings: w.embeddings,
        scores,
        selected: top_k_desc(&ctr, k),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_decoder(vocab: usize) -> (ParamStore, CaptionDecoder) {
        let mut ps = ParamStore::new(5, DType::F64);
        let cfg = CaptionDecoderConfig {
            transformer: TransformerConfig {
                width: 16,
                layers: 1,
                heads: 2,
                mlp_ratio: 2,
            },
            max_context: 12,
            embed_dim: 8,
        };
        let dec = CaptionDecoder::new(&mut ps, cfg, vocab).unwrap();
        (ps, dec)
    }

    #[test]
    fn top_k_orders_by_score() {
        assert_eq!(top_k_desc(&[2.0, -1.0, 0.0], 2), vec![0, 2]);
        assert_eq!(top_k_desc(&[2.0, -1.0, 0.0], 5), vec![0, 2, 1]);
    }

    #[test]
    fn uniform_logits_cost_log_vocab() {
        let v = 11;
        let (_ps, dec) = tiny_decoder(v);
        let lm = dec.lm_head();
        lm.weight().set(&lm.weight().as_tensor().zeros_like().unwrap()).unwrap();
        let f = Tensor::ones((2, 8), DType::F64, &Device::Cpu).unwrap();
        let caps = vec![TokenSeq { ids: vec![BOS, 5, 6, EOS] }, TokenSeq { ids: vec![BOS, 7, EOS] }];
        let l: f64 = caption_lm_loss(&dec, &f, &caps).unwrap().loss.to_scalar().unwrap();
        assert!((l - (v as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_caption_set_is_skipped() {
        let (_ps, dec) = tiny_decoder(8);
        let f = Tensor::zeros((0, 8), DType::F64, &Device::Cpu).unwrap();
        let out = caption_lm_loss(&dec, &f, &[]).unwrap();
        assert!(out.skipped);
        assert_eq!(out.loss.to_scalar::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn eos_favoring_head_yields_empty_caption() {
        let vocab = Vocab::build(["a red square."]);
        let (_ps, dec) = tiny_decoder(vocab.len());
        let lm = dec.lm_head();
        lm.weight().set(&lm.weight().as_tensor().zeros_like().unwrap()).unwrap();
        let mut bias = vec![0f64; vocab.len()];
        bias[EOS as usize] = 5.0;
        lm.bias().unwrap().set(&Tensor::new(bias, &Device::Cpu).unwrap()).unwrap();
        let f = Tensor::ones(8, DType::F64, &Device::Cpu).unwrap();
        assert_eq!(generate_caption(&dec, &vocab, &f, 10).unwrap(), "");
    }

    #[test]
    fn linearity_of_total_loss() {
        let w = LossWeights::default();
        assert!((total_loss_scalar(0.7, 0.3, &w) - 1.0).abs() < 1e-15);
        let w0 = LossWeights { w_c: 0.0, ..w };
        assert_eq!(total_loss_scalar(0.7, 0.3, &w0), 0.7);
    }
}
