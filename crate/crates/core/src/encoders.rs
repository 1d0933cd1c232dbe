//! Image and text towers and the region–concept score matrix.

use candle_core::{DType, Device, Tensor, Var, D};
use serde::{Deserialize, Serialize};

use crate::data::tokenizer::{TokenSeq, PAD};
use crate::data::{Image, Vocab};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::nn::{ops, upsample2x, Conv2d, Embedding, Group, Init, Linear, ParamStore, Transformer, TransformerConfig};

/// Side of the square anchor box in units of its level stride.
pub const ANCHOR_SCALE: f32 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub cx: f32,
    pub cy: f32,
    pub stride: usize,
    pub level: usize,
}

impl Anchor {
    pub fn bbox(&self) -> BBox {
        BBox::centered(self.cx, self.cy, ANCHOR_SCALE * self.stride as f32)
    }

    /// Box from `(l, t, r, b)` distances measured from the anchor center.
    pub fn decode(&self, ltrb: [f32; 4]) -> BBox {
        BBox::new(self.cx - ltrb[0], self.cy - ltrb[1], self.cx + ltrb[2], self.cy + ltrb[3])
    }
}

/// Anchors for an `h × w` input, level-major then row-major.
pub fn generate_anchors(h: usize, w: usize, strides: &[usize]) -> Vec<Anchor> {
    let mut out = Vec::new();
    for (level, &s) in strides.iter().enumerate() {
        for y in 0..h / s {
            for x in 0..w / s {
                out.push(Anchor {
                    cx: (x as f32 + 0.5) * s as f32,
                    cy: (y as f32 + 0.5) * s as f32,
                    stride: s,
                    level,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResolutionPolicy {
    #[default]
    Reject,
    /// Zero-pad bottom/right up to a multiple of the largest stride.
    Pad,
}

/// Batched per-anchor head outputs.
#[derive(Debug, Clone)]
pub struct RegionOutputs {
    /// `(B, K, D)` before normalization.
    pub region_features: Tensor,
    /// `(B, K, 4)` non-negative `(l, t, r, b)` distances in pixels.
    pub box_deltas: Tensor,
    /// `(B, K)`.
    pub centerness_logits: Tensor,
    pub anchors: Vec<Anchor>,
    /// Input size after padding, when padding was applied.
    pub padded_to: Option<(usize, usize)>,
}

impl RegionOutputs {
    pub fn k(&self) -> usize {
        self.anchors.len()
    }

    pub fn batch(&self) -> usize {
        self.region_features.dims()[0]
    }

    /// Decoded boxes of image `b` in pixels, unclipped.
    pub fn decoded_boxes(&self, b: usize) -> Result<Vec<BBox>> {
        let d: Vec<Vec<f32>> = self.box_deltas.get(b)?.to_dtype(DType::F32)?.to_vec2()?;
        Ok(self
            .anchors
            .iter()
            .zip(d)
            .map(|(a, v)| a.decode([v[0], v[1], v[2], v[3]]))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImageEncoderConfig {
    /// Stem, stage 2, C3, C4, C5 widths.
    pub channels: [usize; 5],
    pub fpn_dim: usize,
    pub embed_dim: usize,
    pub tower_depth: usize,
    pub strides: Vec<usize>,
    pub coord_conv: bool,
    pub resolution: ResolutionPolicy,
}

impl Default for ImageEncoderConfig {
    fn default() -> Self {
        Self {
            channels: [16, 32, 64, 96, 128],
            fpn_dim: 64,
            embed_dim: 64,
            tower_depth: 2,
            strides: vec![8, 16, 32],
            coord_conv: true,
            resolution: ResolutionPolicy::Reject,
        }
    }
}

/// Stack images into a `(B, H, W, 3)` tensor, applying the resolution policy.
pub fn images_to_tensor(
    images: &[&Image],
    max_stride: usize,
    policy: ResolutionPolicy,
    dtype: DType,
) -> Result<(Tensor, Option<(usize, usize)>)> {
    let first = images
        .first()
        .ok_or_else(|| Error::Shape("empty image batch".into()))?;
    let (h, w) = (first.height(), first.width());
    if images.iter().any(|im| im.height() != h || im.width() != w) {
        return Err(Error::Shape("images in a batch must share a size".into()));
    }
    let divisible = h % max_stride == 0 && w % max_stride == 0;
    let (ph, pw) = match (divisible, policy) {
        (true, _) => (h, w),
        (false, ResolutionPolicy::Reject) => {
            return Err(Error::Shape(format!(
                "input {h}x{w} is not divisible by stride {max_stride}"
            )))
        }
        (false, ResolutionPolicy::Pad) => (h.div_ceil(max_stride) * max_stride, w.div_ceil(max_stride) * max_stride),
    };
    let mut data = vec![0f32; images.len() * ph * pw * 3];
    for (i, im) in images.iter().enumerate() {
        let hwc = im.to_hwc_f32();
        for y in 0..h {
            let dst = ((i * ph + y) * pw) * 3;
            data[dst..dst + w * 3].copy_from_slice(&hwc[y * w * 3..(y + 1) * w * 3]);
        }
    }
    let t = Tensor::from_vec(data, (images.len(), ph, pw, 3), &Device::Cpu)?.to_dtype(dtype)?;
    Ok((t, (!divisible).then_some((ph, pw))))
}

fn coord_channels(b: usize, h: usize, w: usize, dtype: DType) -> Result<Tensor> {
    let mut data = Vec::with_capacity(h * w * 2);
    for y in 0..h {
        for x in 0..w {
            data.push((2.0 * x as f32 + 1.0) / w as f32 - 1.0);
            data.push((2.0 * y as f32 + 1.0) / h as f32 - 1.0);
        }
    }
    let t = Tensor::from_vec(data, (1, h, w, 2), &Device::Cpu)?.to_dtype(dtype)?;
    Ok(t.broadcast_as((b, h, w, 2))?.contiguous()?)
}

#[derive(Debug, Clone)]
struct Tower {
    convs: Vec<Conv2d>,
}

impl Tower {
    fn new(ps: &mut ParamStore, name: &str, dim: usize, depth: usize) -> Result<Self> {
        let convs = (0..depth)
            .map(|i| Conv2d::new(ps, &format!("{name}.{i}"), dim, dim, 3, 1, Group::Image))
            .collect::<Result<_>>()?;
        Ok(Self { convs })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for c in &self.convs {
            h = c.forward(&h)?.relu()?;
        }
        Ok(h)
    }
}

/// Small conv backbone, three-level feature pyramid, and shared per-level heads.
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    cfg: ImageEncoderConfig,
    backbone: Vec<Conv2d>,
    /// Indices into `backbone` whose outputs feed the pyramid (C3, C4, C5).
    taps: [usize; 3],
    laterals: Vec<Conv2d>,
    cls_tower: Tower,
    reg_tower: Tower,
    embed: Conv2d,
    box_head: Conv2d,
    ctr_head: Conv2d,
}

impl ImageEncoder {
    pub fn new(ps: &mut ParamStore, cfg: ImageEncoderConfig) -> Result<Self> {
        if cfg.strides != [8, 16, 32] {
            return Err(Error::Config("image encoder supports strides [8, 16, 32] only".into()));
        }
        let [c1, c2, c3, c4, c5] = cfg.channels;
        let cin = if cfg.coord_conv { 5 } else { 3 };
        let g = Group::Image;
        let backbone = vec![
            Conv2d::new(ps, "image.stem", cin, c1, 3, 2, g)?,
            Conv2d::new(ps, "image.s2.down", c1, c2, 3, 2, g)?,
            Conv2d::new(ps, "image.s2.conv", c2, c2, 3, 1, g)?,
            Conv2d::new(ps, "image.s3.down", c2, c3, 3, 2, g)?,
            Conv2d::new(ps, "image.s3.conv", c3, c3, 3, 1, g)?,
            Conv2d::new(ps, "image.s4.down", c3, c4, 3, 2, g)?,
            Conv2d::new(ps, "image.s5.down", c4, c5, 3, 2, g)?,
        ];
        let f = cfg.fpn_dim;
        let laterals = vec![
            Conv2d::new(ps, "image.fpn.lat3", c3, f, 1, 1, g)?,
            Conv2d::new(ps, "image.fpn.lat4", c4, f, 1, 1, g)?,
            Conv2d::new(ps, "image.fpn.lat5", c5, f, 1, 1, g)?,
        ];
        let cls_tower = Tower::new(ps, "image.cls_tower", f, cfg.tower_depth)?;
        let reg_tower = Tower::new(ps, "image.reg_tower", f, cfg.tower_depth)?;
        let head_init = Init::Normal(0.01);
        let embed = Conv2d::with_init(ps, "image.embed", f, cfg.embed_dim, 3, Init::kaiming(9 * f), Init::Const(0.0), g)?;
        let box_head = Conv2d::with_init(ps, "image.box", f, 4, 3, head_init, Init::Const(0.0), g)?;
        let ctr_head = Conv2d::with_init(ps, "image.centerness", f, 1, 3, head_init, Init::Const(0.0), g)?;
        Ok(Self {
            cfg,
            backbone,
            taps: [4, 5, 6],
            laterals,
            cls_tower,
            reg_tower,
            embed,
            box_head,
            ctr_head,
        })
    }

    pub fn config(&self) -> &ImageEncoderConfig {
        &self.cfg
    }

    pub fn max_stride(&self) -> usize {
        *self.cfg.strides.last().unwrap()
    }

    /// Box and centerness head parameters (the detection-only branch).
    pub fn detection_head_vars(&self) -> Vec<&Var> {
        let mut v = vec![
            self.box_head.weight(),
            self.box_head.bias(),
            self.ctr_head.weight(),
            self.ctr_head.bias(),
        ];
        for c in &self.reg_tower.convs {
            v.push(c.weight());
            v.push(c.bias());
        }
        v
    }

    pub fn encode(&self, images: &[&Image], dtype: DType) -> Result<RegionOutputs> {
        let (x, padded) = images_to_tensor(images, self.max_stride(), self.cfg.resolution, dtype)?;
        let mut out = self.forward(&x)?;
        out.padded_to = padded;
        Ok(out)
    }

    /// Forward over `(B, H, W, 3)` with values in `[0, 1]`.
    pub fn forward(&self, x: &Tensor) -> Result<RegionOutputs> {
        let (b, h, w, _) = x.dims4()?;
        let s = self.max_stride();
        if h % s != 0 || w % s != 0 {
            return Err(Error::Shape(format!("input {h}x{w} is not divisible by stride {s}")));
        }
        let mut feat = if self.cfg.coord_conv {
            Tensor::cat(&[x, &coord_channels(b, h, w, x.dtype())?], 3)?
        } else {
            x.clone()
        };
        let mut taps = Vec::with_capacity(3);
        for (i, conv) in self.backbone.iter().enumerate() {
            feat = conv.forward(&feat)?.relu()?;
            if self.taps.contains(&i) {
                taps.push(feat.clone());
            }
        }
        let p5 = self.laterals[2].forward(&taps[2])?;
        let p4 = (self.laterals[1].forward(&taps[1])? + upsample2x(&p5)?)?;
        let p3 = (self.laterals[0].forward(&taps[0])? + upsample2x(&p4)?)?;

        let mut feats = Vec::with_capacity(3);
        let mut boxes = Vec::with_capacity(3);
        let mut ctrs = Vec::with_capacity(3);
        for (p, &stride) in [p3, p4, p5].iter().zip(&self.cfg.strides) {
            let (_, lh, lw, _) = p.dims4()?;
            let n = lh * lw;
            let cls = self.cls_tower.forward(p)?;
            feats.push(self.embed.forward(&cls)?.reshape((b, n, self.cfg.embed_dim))?);
            let reg = self.reg_tower.forward(p)?;
            let raw = self.box_head.forward(&reg)?.reshape((b, n, 4))?;
            boxes.push((raw.clamp(-8.0, 8.0)?.exp()? * stride as f64)?);
            ctrs.push(self.ctr_head.forward(&reg)?.reshape((b, n))?);
        }
        Ok(RegionOutputs {
            region_features: Tensor::cat(&feats, 1)?,
            box_deltas: Tensor::cat(&boxes, 1)?,
            centerness_logits: Tensor::cat(&ctrs, 1)?,
            anchors: generate_anchors(h, w, &self.cfg.strides),
            padded_to: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub transformer: TransformerConfig,
    pub max_context: usize,
    pub embed_dim: usize,
}

impl Default for TextEncoderConfig {
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

/// `(M, D)` unit rows, one per concept.
#[derive(Debug, Clone)]
pub struct TextEmbeddings {
    pub embeddings: Tensor,
}

impl TextEmbeddings {
    pub fn m(&self) -> usize {
        self.embeddings.dims()[0]
    }
}

/// Pad token sequences into a `(M, L)` id tensor; returns it with the EOS positions.
pub fn pad_token_batch(seqs: &[TokenSeq], len: Option<usize>) -> Result<(Tensor, Vec<usize>)> {
    let max = seqs.iter().map(|s| s.len()).max().unwrap_or(1).max(1);
    let l = len.unwrap_or(max).max(max);
    let mut ids = vec![PAD; seqs.len() * l];
    let mut eos = Vec::with_capacity(seqs.len());
    for (i, s) in seqs.iter().enumerate() {
        ids[i * l..i * l + s.len()].copy_from_slice(&s.ids);
        eos.push(s.eos_position());
    }
    Ok((Tensor::from_vec(ids, (seqs.len(), l), &Device::Cpu)?, eos))
}

/// Causal transformer over concept tokens, read out at EOS.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    cfg: TextEncoderConfig,
    tokens: Embedding,
    positions: Var,
    transformer: Transformer,
    proj: Linear,
}

impl TextEncoder {
    pub fn new(ps: &mut ParamStore, cfg: TextEncoderConfig, vocab_size: usize) -> Result<Self> {
        let w = cfg.transformer.width;
        let g = Group::Text;
        Ok(Self {
            tokens: Embedding::new(ps, "text.tokens", vocab_size, w, g)?,
            positions: ps.create("text.positions", &[cfg.max_context, w], Init::Normal(0.01), g)?,
            transformer: Transformer::new(ps, "text.transformer", cfg.transformer, g)?,
            proj: Linear::with_init(ps, "text.proj", w, cfg.embed_dim, Init::fan_in(w), None, g)?,
            cfg,
        })
    }

    pub fn config(&self) -> &TextEncoderConfig {
        &self.cfg
    }

    pub fn encode_texts(&self, texts: &[String], vocab: &Vocab) -> Result<TextEmbeddings> {
        let seqs: Vec<TokenSeq> = texts
            .iter()
            .map(|t| vocab.tokenize(t, self.cfg.max_context))
            .collect();
        self.encode_tokens(&seqs)
    }

    pub fn encode_tokens(&self, seqs: &[TokenSeq]) -> Result<TextEmbeddings> {
        self.encode_padded(seqs, None)
    }

    /// As [`TextEncoder::encode_tokens`], padding every sequence to at least `len`.
    pub fn encode_padded(&self, seqs: &[TokenSeq], len: Option<usize>) -> Result<TextEmbeddings> {
        if seqs.is_empty() {
            return Err(Error::Shape("no concepts to encode".into()));
        }
        let (ids, eos) = pad_token_batch(seqs, len)?;
        let (m, l) = ids.dims2()?;
        if l > self.cfg.max_context {
            return Err(Error::Shape(format!(
                "token length {l} exceeds context {}",
                self.cfg.max_context
            )));
        }
        let w = self.cfg.transformer.width;
        let x = self
            .tokens
            .forward(&ids)?
            .broadcast_add(&self.positions.as_tensor().narrow(0, 0, l)?)?;
        let h = self.transformer.forward(&x)?.reshape((m * l, w))?;
        let idx: Vec<u32> = eos.iter().enumerate().map(|(i, &e)| (i * l + e) as u32).collect();
        let idx = Tensor::from_vec(idx, m, &Device::Cpu)?;
        let pooled = h.index_select(&idx, 0)?;
        Ok(TextEmbeddings {
            embeddings: ops::l2_normalize(&self.proj.forward(&pooled)?)?,
        })
    }
}

/// `S = scale · normalize(O) Wᵀ + bias` for `O` of shape `(.., K, D)` and `W` of shape `(M, D)`.
pub fn alignment_scores(regions: &Tensor, texts: &Tensor, scale: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let rd = *regions.dims().last().unwrap_or(&0);
    let (m, td) = texts.dims2()?;
    if rd != td {
        return Err(Error::Shape(format!("region dim {rd} != text dim {td}")));
    }
    let dims = regions.dims().to_vec();
    let rows: usize = dims[..dims.len() - 1].iter().product();
    let o = ops::l2_normalize(&regions.reshape((rows, rd))?)?;
    let s = o
        .matmul(&texts.t()?)?
        .broadcast_mul(scale)?
        .broadcast_add(bias)?;
    let mut out = dims;
    *out.last_mut().unwrap() = m;
    Ok(s.reshape(out)?)
}

/// Learnable logit scale (stored as a log) and bias of the score matrix.
#[derive(Debug, Clone)]
pub struct AlignHead {
    log_scale: Var,
    bias: Var,
}

/// Initial bias so that every score starts near a 0.01 prior.
pub const PRIOR_BIAS: f64 = -4.59512;

impl AlignHead {
    pub fn new(ps: &mut ParamStore) -> Result<Self> {
        Ok(Self {
            log_scale: ps.create("align.log_scale", &[1], Init::Const(10f64.ln()), Group::Image)?,
            bias: ps.create("align.bias", &[1], Init::Const(PRIOR_BIAS), Group::Image)?,
        })
    }

    pub fn scale(&self) -> Result<Tensor> {
        Ok(self.log_scale.as_tensor().exp()?)
    }

    pub fn bias(&self) -> &Tensor {
        self.bias.as_tensor()
    }

    pub fn scores(&self, regions: &Tensor, texts: &TextEmbeddings) -> Result<Tensor> {
        alignment_scores(regions, &texts.embeddings, &self.scale()?, self.bias())
    }
}

/// Largest deviation of any row norm from 1.
pub fn max_norm_error(embeddings: &Tensor) -> Result<f64> {
    let n: Vec<f64> = embeddings
        .to_dtype(DType::F64)?
        .sqr()?
        .sum(D::Minus1)?
        .sqrt()?
        .to_vec1()?;
    Ok(n.iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_image(seed: u8) -> Image {
        let mut im = Image::new(64, 64);
        for y in 0..64 {
            for x in 0..64 {
                let v = ((x * 7 + y * 13 + seed as usize * 31) % 256) as u8;
                im.set_rgb(y, x, [v, v.wrapping_mul(3), 255 - v]);
            }
        }
        im
    }

    #[test]
    fn anchor_count_on_64_square() {
        let a = generate_anchors(64, 64, &[8, 16, 32]);
        assert_eq!(a.len(), 84);
        assert_eq!(a[0].cx, 4.0);
        assert_eq!(a[64].stride, 16);
        assert_eq!(a[83].cx, 48.0);
    }

    #[test]
    fn encoder_shapes() {
        let mut ps = ParamStore::new(0, DType::F32);
        let enc = ImageEncoder::new(&mut ps, ImageEncoderConfig::default()).unwrap();
        let a = tiny_image(0);
        let b = tiny_image(1);
        let out = enc.encode(&[&a, &b], DType::F32).unwrap();
        assert_eq!(out.region_features.dims(), &[2, 84, 64]);
        assert_eq!(out.box_deltas.dims(), &[2, 84, 4]);
        assert_eq!(out.centerness_logits.dims(), &[2, 84]);
        let d: Vec<f32> = out.box_deltas.flatten_all().unwrap().to_vec1().unwrap();
        assert!(d.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn resolution_policy() {
        let mut ps = ParamStore::new(0, DType::F32);
        let mut cfg = ImageEncoderConfig::default();
        let enc = ImageEncoder::new(&mut ps, cfg.clone()).unwrap();
        let im = Image::new(40, 64);
        assert!(matches!(enc.encode(&[&im], DType::F32), Err(Error::Shape(_))));
        cfg.resolution = ResolutionPolicy::Pad;
        let mut ps = ParamStore::new(0, DType::F32);
        let enc = ImageEncoder::new(&mut ps, cfg).unwrap();
        let out = enc.encode(&[&im], DType::F32).unwrap();
        assert_eq!(out.padded_to, Some((64, 64)));
        assert_eq!(out.k(), 84);
    }

    #[test]
    fn alignment_of_identical_and_orthogonal_vectors() {
        let dev = Device::Cpu;
        let o = Tensor::new(&[[1f64, 0.0, 0.0], [0.0, 1.0, 0.0]], &dev).unwrap();
        let w = Tensor::new(&[[1f64, 0.0, 0.0]], &dev).unwrap();
        let one = Tensor::new(&[1f64], &dev).unwrap();
        let zero = Tensor::new(&[0f64], &dev).unwrap();
        let s: Vec<Vec<f64>> = alignment_scores(&o, &w, &one, &zero).unwrap().to_vec2().unwrap();
        assert_eq!(s, vec![vec![1.0], vec![0.0]]);
        let bad = Tensor::new(&[[1f64, 0.0]], &dev).unwrap();
        assert!(matches!(alignment_scores(&o, &bad, &one, &zero), Err(Error::Shape(_))));
    }
}
