//! Alignment targets and the detection-side losses.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::assign::Assignment;
use crate::data::Source;
use crate::encoders::{Anchor, RegionOutputs};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::nn::ops;

pub const GIOU_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Regression weight.
    pub alpha: f64,
    /// Centerness weight.
    pub beta: f64,
    pub w_d: f64,
    pub w_c: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    /// Weight each positive's GIoU term by its centerness target.
    pub centerness_weighted_giou: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 1.0,
            w_d: 1.0,
            w_c: 1.0,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            centerness_weighted_giou: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.w_d, self.w_c, self.focal_gamma];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) {
            return Err(Error::Config("focal alpha must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Dense `K × M` ground-truth alignment matrix, row-major.
pub fn build_alignment_targets(
    assignment: &Assignment,
    concept_index_of_gt: &[usize],
    k: usize,
    m: usize,
) -> Result<Vec<u8>> {
    if assignment.k() != k {
        return Err(Error::Contract(format!("assignment covers {} anchors, expected {k}", assignment.k())));
    }
    let mut g = vec![0u8; k * m];
    for (a, gt) in assignment.positives() {
        let c = *concept_index_of_gt
            .get(gt)
            .ok_or_else(|| Error::Contract(format!("gt {gt} has no concept index")))?;
        if c >= m {
            return Err(Error::Contract(format!("concept index {c} out of range for M={m}")));
        }
        g[a * m + c] = 1;
    }
    Ok(g)
}

/// Element-wise sigmoid focal loss; same shape as the inputs.
pub fn focal_elementwise(logits: &Tensor, targets: &Tensor, gamma: f64, alpha: f64) -> Result<Tensor> {
    if logits.dims() != targets.dims() {
        return Err(Error::Shape(format!(
            "logits {:?} vs targets {:?}",
            logits.dims(),
            targets.dims()
        )));
    }
    let t = targets;
    let one_minus_t = t.affine(-1.0, 1.0)?;
    let ls_pos = ops::log_sigmoid(logits)?;
    let ls_neg = ops::log_sigmoid(&logits.neg()?)?;
    let ce = ((t * &ls_pos)? + (&one_minus_t * &ls_neg)?)?.neg()?;
    // 1 - p_t
    let q = ((t * ls_neg.exp()?)? + (&one_minus_t * ls_pos.exp()?)?)?;
    let modulator = if gamma == 0.0 {
        None
    } else if gamma == 1.0 {
        Some(q)
    } else if gamma == 2.0 {
        Some(q.sqr()?)
    } else {
        Some(q.maximum(1e-30)?.powf(gamma)?)
    };
    let alpha_t = t.affine(2.0 * alpha - 1.0, 1.0 - alpha)?;
    let loss = (alpha_t * ce)?;
    Ok(match modulator {
        Some(m) => (loss * m)?,
        None => loss,
    })
}

/// Focal loss of one sample's `K × M` scores, summed and divided by `max(1, #positives)`.
pub fn focal_alignment_loss(logits: &Tensor, targets: &Tensor, gamma: f64, alpha: f64) -> Result<Tensor> {
    let npos: f64 = targets.to_dtype(DType::F64)?.sum_all()?.to_scalar()?;
    let l = focal_elementwise(logits, targets, gamma, alpha)?.sum_all()?;
    Ok((l / npos.max(1.0))?)
}

/// `sqrt(min(l,r)/max(l,r) · min(t,b)/max(t,b))` for a point strictly inside `gt`.
pub fn centerness_target(cx: f64, cy: f64, gt: &BBox) -> Result<f64> {
    let l = cx - gt.x1 as f64;
    let t = cy - gt.y1 as f64;
    let r = gt.x2 as f64 - cx;
    let b = gt.y2 as f64 - cy;
    if l <= 0.0 || t <= 0.0 || r <= 0.0 || b <= 0.0 {
        return Err(Error::Contract(format!("point ({cx}, {cy}) is not inside {gt:?}")));
    }
    Ok(((l.min(r) / l.max(r)) * (t.min(b) / t.max(b))).sqrt())
}

/// Binary cross-entropy with logits, element-wise.
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let pos = (targets * ops::log_sigmoid(logits)?)?;
    let neg = (targets.affine(-1.0, 1.0)? * ops::log_sigmoid(&logits.neg()?)?)?;
    Ok((pos + neg)?.neg()?)
}

/// `1 - GIoU` per row of `(P, 4)` corner-format boxes; predicted sides are clamped to `GIOU_EPS`.
pub fn giou_loss(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    let col = |t: &Tensor, i: usize| t.narrow(D::Minus1, i, 1).and_then(|c| c.squeeze(D::Minus1));
    let (px1, py1) = (col(pred, 0)?, col(pred, 1)?);
    let pw = (col(pred, 2)? - &px1)?.maximum(GIOU_EPS)?;
    let ph = (col(pred, 3)? - &py1)?.maximum(GIOU_EPS)?;
    let px2 = (&px1 + &pw)?;
    let py2 = (&py1 + &ph)?;
    let (gx1, gy1, gx2, gy2) = (col(gt, 0)?, col(gt, 1)?, col(gt, 2)?, col(gt, 3)?);
    let ga = ((&gx2 - &gx1)? * (&gy2 - &gy1)?)?;
    let pa = (&pw * &ph)?;
    let iw = (px2.minimum(&gx2)? - px1.maximum(&gx1)?)?.relu()?;
    let ih = (py2.minimum(&gy2)? - py1.maximum(&gy1)?)?.relu()?;
    let inter = (iw * ih)?;
    let union = ((pa + ga)? - &inter)?;
    let cw = (px2.maximum(&gx2)? - px1.minimum(&gx1)?)?;
    let ch = (py2.maximum(&gy2)? - py1.minimum(&gy1)?)?;
    let c = (cw * ch)?;
    let giou = ((inter / &union)? - ((&c - &union)? / &c)?)?;
    Ok(giou.affine(-1.0, 1.0)?)
}

/// Scalar `1 - GIoU` in f64 with the same side clamping as [`giou_loss`].
pub fn giou_loss_scalar(pred: &BBox, gt: &BBox) -> f64 {
    let x1 = pred.x1 as f64;
    let y1 = pred.y1 as f64;
    let x2 = x1 + (pred.x2 as f64 - x1).max(GIOU_EPS);
    let y2 = y1 + (pred.y2 as f64 - y1).max(GIOU_EPS);
    let (gx1, gy1, gx2, gy2) = (gt.x1 as f64, gt.y1 as f64, gt.x2 as f64, gt.y2 as f64);
    let inter = (x2.min(gx2) - x1.max(gx1)).max(0.0) * (y2.min(gy2) - y1.max(gy1)).max(0.0);
    let union = (x2 - x1) * (y2 - y1) + (gx2 - gx1) * (gy2 - gy1) - inter;
    let c = (x2.max(gx2) - x1.min(gx1)) * (y2.max(gy2) - y1.min(gy1));
    1.0 - (inter / union - (c - union) / c)
}

/// Everything the losses need about one sample's ground truth.
#[derive(Debug, Clone)]
pub struct SampleTargets {
    pub source: Source,
    pub assignment: Assignment,
    /// `K × M` row-major.
    pub alignment: Vec<u8>,
    /// Positive anchors with their GT index and centerness target.
    pub positives: Vec<PositiveAnchor>,
    /// One anchor per GT for the caption loss (`None` when a GT has no positive anchor).
    pub caption_anchor: Vec<Option<usize>>,
    pub gt_boxes: Vec<BBox>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositiveAnchor {
    pub anchor: usize,
    pub gt: usize,
    pub centerness: f64,
}

impl SampleTargets {
    pub fn build(
        source: Source,
        anchors: &[Anchor],
        gt_boxes: &[BBox],
        concept_index_of_gt: &[usize],
        m: usize,
        topk: usize,
    ) -> Result<Self> {
        let assignment = crate::assign::atss_assign(anchors, gt_boxes, topk)?;
        let alignment = build_alignment_targets(&assignment, concept_index_of_gt, anchors.len(), m)?;
        let mut positives = Vec::new();
        let mut best: Vec<Option<(f64, f64, usize)>> = vec![None; gt_boxes.len()];
        for (k, g) in assignment.positives() {
            let a = &anchors[k];
            let ctr = centerness_target(a.cx as f64, a.cy as f64, &gt_boxes[g])?;
            positives.push(PositiveAnchor {
                anchor: k,
                gt: g,
                centerness: ctr,
            });
            let iou = a.bbox().iou(&gt_boxes[g]);
            let better = match best[g] {
                None => true,
                Some((bi, bc, _)) => iou > bi || (iou == bi && ctr > bc),
            };
            if better {
                best[g] = Some((iou, ctr, k));
            }
        }
        Ok(Self {
            source,
            assignment,
            alignment,
            positives,
            caption_anchor: best.into_iter().map(|b| b.map(|(_, _, k)| k)).collect(),
            gt_boxes: gt_boxes.to_vec(),
        })
    }

    pub fn num_positive(&self) -> usize {
        self.positives.len()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionBreakdown {
    pub align: f64,
    pub reg: f64,
    pub center: f64,
    pub total: f64,
}

/// Differentiable detection loss with its scalar breakdown.
pub struct DetectionLoss {
    pub total: Tensor,
    pub align: Tensor,
    pub reg: Tensor,
    pub center: Tensor,
}

impl DetectionLoss {
    pub fn breakdown(&self) -> Result<DetectionBreakdown> {
        let f = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok(DetectionBreakdown {
            align: f(&self.align)?,
            reg: f(&self.reg)?,
            center: f(&self.center)?,
            total: f(&self.total)?,
        })
    }
}

/// Per-sample branch on source, averaged over the batch:
/// detection samples get `L_align + α·L_reg + β·L_center`, dense-caption samples `L_align`.
pub fn detection_loss(
    outputs: &RegionOutputs,
    scores: &Tensor,
    targets: &[SampleTargets],
    weights: &LossWeights,
) -> Result<DetectionLoss> {
    let (b, k, m) = scores.dims3()?;
    if targets.len() != b || outputs.k() != k {
        return Err(Error::Shape(format!(
            "scores {:?} vs {} targets over {} anchors",
            scores.dims(),
            targets.len(),
            outputs.k()
        )));
    }
    let dtype = scores.dtype();
    let dev = Device::Cpu;
    let bf = b as f64;

    let mut g = Vec::with_capacity(b * k * m);
    let mut inv_pos = Vec::with_capacity(b);
    for t in targets {
        if t.alignment.len() != k * m {
            return Err(Error::Shape("alignment target size does not match scores".into()));
        }
        g.extend(t.alignment.iter().map(|&v| v as f32));
        inv_pos.push(1.0 / (t.num_positive().max(1) as f64 * bf));
    }
    let g = Tensor::from_vec(g, (b, k, m), &dev)?.to_dtype(dtype)?;
    let per_sample = focal_elementwise(scores, &g, weights.focal_gamma, weights.focal_alpha)?
        .reshape((b, k * m))?
        .sum(1)?;
    let inv_pos = Tensor::from_vec(inv_pos, b, &dev)?.to_dtype(dtype)?;
    let align = (per_sample * inv_pos)?.sum_all()?;

    let mut idx = Vec::new();
    let mut gt_boxes = Vec::new();
    let mut ctr_t = Vec::new();
    let mut reg_w = Vec::new();
    let mut ctr_w = Vec::new();
    for (i, t) in targets.iter().enumerate() {
        if t.source != Source::Detection || t.positives.is_empty() {
            continue;
        }
        let wsum: f64 = if weights.centerness_weighted_giou {
            t.positives.iter().map(|p| p.centerness).sum()
        } else {
            t.positives.len() as f64
        };
        let n = t.positives.len() as f64;
        for p in &t.positives {
            idx.push((i * k + p.anchor) as u32);
            let gb = t.gt_boxes[p.gt];
            gt_boxes.extend([gb.x1, gb.y1, gb.x2, gb.y2]);
            ctr_t.push(p.centerness);
            let w = if weights.centerness_weighted_giou { p.centerness } else { 1.0 };
            reg_w.push(w / (wsum * bf));
            ctr_w.push(1.0 / (n * bf));
        }
    }
    let zero = Tensor::zeros((), dtype, &dev)?;
    let (reg, center) = if idx.is_empty() {
        (zero.clone(), zero)
    } else {
        let p = idx.len();
        let idx = Tensor::from_vec(idx, p, &dev)?;
        let deltas = outputs.box_deltas.reshape((b * k, 4))?.index_select(&idx, 0)?;
        let mut centers = Vec::with_capacity(p * 4);
        for &flat in idx.to_vec1::<u32>()?.iter() {
            let a = &outputs.anchors[flat as usize % k];
            centers.extend([a.cx, a.cy, a.cx, a.cy]);
        }
        let sign = Tensor::from_vec([-1f32, -1.0, 1.0, 1.0].repeat(p), (p, 4), &dev)?.to_dtype(dtype)?;
        let centers = Tensor::from_vec(centers, (p, 4), &dev)?.to_dtype(dtype)?;
        // (cx - l, cy - t, cx + r, cy + b)
        let pred = ((deltas * sign)? + centers)?;
        let gt = Tensor::from_vec(gt_boxes, (p, 4), &dev)?.to_dtype(dtype)?;
        let reg_w = Tensor::from_vec(reg_w, p, &dev)?.to_dtype(dtype)?;
        let reg = (giou_loss(&pred, &gt)? * reg_w)?.sum_all()?;

        let logits = outputs.centerness_logits.reshape(b * k)?.index_select(&idx, 0)?;
        let ctr_t = Tensor::from_vec(ctr_t, p, &dev)?.to_dtype(dtype)?;
        let ctr_w = Tensor::from_vec(ctr_w, p, &dev)?.to_dtype(dtype)?;
        let center = (bce_with_logits(&logits, &ctr_t)? * ctr_w)?.sum_all()?;
        (reg, center)
    };
    let total = ((&align + (&reg * weights.alpha)?)? + (&center * weights.beta)?)?;
    Ok(DetectionLoss {
        total,
        align,
        reg,
        center,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn focal_single_positive_at_zero_logit() {
        let s = Tensor::new(&[[0f64]], &Device::Cpu).unwrap();
        let g = Tensor::new(&[[1f64]], &Device::Cpu).unwrap();
        let l: f64 = focal_alignment_loss(&s, &g, 2.0, 0.25).unwrap().to_scalar().unwrap();
        assert!((l - 0.25 * 0.25 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn focal_without_modulation_is_scaled_bce() {
        let s = Tensor::new(&[[0.3f64, -1.2], [2.0, 0.1]], &Device::Cpu).unwrap();
        let g = Tensor::new(&[[1f64, 0.0], [0.0, 1.0]], &Device::Cpu).unwrap();
        let f: f64 = focal_elementwise(&s, &g, 0.0, 0.5).unwrap().sum_all().unwrap().to_scalar().unwrap();
        let b: f64 = bce_with_logits(&s, &g).unwrap().sum_all().unwrap().to_scalar().unwrap();
        assert!((f - 0.5 * b).abs() < 1e-12);
    }

    #[test]
    fn confident_negative_costs_nothing() {
        let s = Tensor::new(&[-1e4f64], &Device::Cpu).unwrap();
        let g = Tensor::new(&[0f64], &Device::Cpu).unwrap();
        let l: f64 = focal_elementwise(&s, &g, 2.0, 0.25).unwrap().sum_all().unwrap().to_scalar().unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn centerness_examples() {
        let b = BBox::new(0.0, 0.0, 4.0, 4.0);
        assert_eq!(centerness_target(2.0, 2.0, &b).unwrap(), 1.0);
        assert!((centerness_target(1.0, 1.0, &b).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!(centerness_target(1e-9, 2.0, &b).unwrap() < 1e-4);
        assert!(centerness_target(5.0, 2.0, &b).is_err());
    }

    #[test]
    fn giou_examples() {
        let p = Tensor::new(&[[0f64, 0.0, 1.0, 1.0], [0.0, 0.0, 2.0, 2.0], [1.0, 1.0, 3.0, 3.0]], &Device::Cpu).unwrap();
        let g = Tensor::new(&[[2f64, 2.0, 3.0, 3.0], [1.0, 1.0, 2.0, 2.0], [1.0, 1.0, 3.0, 3.0]], &Device::Cpu).unwrap();
        let l: Vec<f64> = giou_loss(&p, &g).unwrap().to_vec1().unwrap();
        assert!((l[0] - 16.0 / 9.0).abs() < 1e-12);
        assert!((l[1] - 0.75).abs() < 1e-12);
        assert!(l[2].abs() < 1e-12);
    }

    #[test]
    fn alignment_targets_direct() {
        let a = Assignment {
            anchor_to_gt: vec![0, -1],
            pos_mask: vec![true, false],
        };
        assert_eq!(build_alignment_targets(&a, &[1], 2, 3).unwrap(), vec![0, 1, 0, 0, 0, 0]);
        assert!(build_alignment_targets(&a, &[3], 2, 3).is_err());
        assert!(build_alignment_targets(&Assignment::negative(2), &[], 2, 3).unwrap().iter().all(|&v| v == 0));
    }
}
