//! Adaptive anchor-to-box assignment.

use serde::{Deserialize, Serialize};

use crate::encoders::Anchor;
use crate::error::{Error, Result};
use crate::geometry::BBox;

pub const DEFAULT_TOPK: usize = 9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    /// GT index per anchor, `-1` for negatives.
    pub anchor_to_gt: Vec<i64>,
    pub pos_mask: Vec<bool>,
}

impl Assignment {
    pub fn negative(k: usize) -> Self {
        Self {
            anchor_to_gt: vec![-1; k],
            pos_mask: vec![false; k],
        }
    }

    pub fn k(&self) -> usize {
        self.anchor_to_gt.len()
    }

    pub fn gt_of(&self, k: usize) -> Option<usize> {
        usize::try_from(self.anchor_to_gt[k]).ok()
    }

    pub fn positives(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.anchor_to_gt
            .iter()
            .enumerate()
            .filter_map(|(k, &g)| usize::try_from(g).ok().map(|g| (k, g)))
    }

    pub fn num_positive(&self) -> usize {
        self.pos_mask.iter().filter(|&&p| p).count()
    }
}

fn center_dist(a: &Anchor, b: &BBox) -> f64 {
    let gx = (b.x1 as f64 + b.x2 as f64) / 2.0;
    let gy = (b.y1 as f64 + b.y2 as f64) / 2.0;
    let dx = a.cx as f64 - gx;
    let dy = a.cy as f64 - gy;
    (dx * dx + dy * dy).sqrt()
}

/// Candidates per GT: the `topk` anchors per level whose centers are closest to the GT center.
/// Threshold: mean + sample standard deviation of candidate IoUs. A candidate becomes positive
/// when its IoU reaches the threshold and its center lies strictly inside the GT. An anchor
/// claimed by several GTs goes to the one it overlaps most (lower index on ties).
pub fn atss_assign(anchors: &[Anchor], gt_boxes: &[BBox], topk_per_level: usize) -> Result<Assignment> {
    if topk_per_level == 0 {
        return Err(Error::Contract("topk_per_level must be at least 1".into()));
    }
    let k = anchors.len();
    let mut out = Assignment::negative(k);
    if gt_boxes.is_empty() {
        return Ok(out);
    }
    let num_levels = anchors.iter().map(|a| a.level + 1).max().unwrap_or(0);
    let mut by_level: Vec<Vec<usize>> = vec![Vec::new(); num_levels];
    for (i, a) in anchors.iter().enumerate() {
        by_level[a.level].push(i);
    }

    let mut best_iou = vec![f64::NEG_INFINITY; k];
    for (g, gt) in gt_boxes.iter().enumerate() {
        let mut candidates = Vec::new();
        for level in &by_level {
            let mut order: Vec<(f64, usize)> = level.iter().map(|&i| (center_dist(&anchors[i], gt), i)).collect();
            order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            candidates.extend(order.iter().take(topk_per_level).map(|&(_, i)| i));
        }
        let ious: Vec<f64> = candidates.iter().map(|&i| anchors[i].bbox().iou(gt)).collect();
        let n = ious.len() as f64;
        let mean = ious.iter().sum::<f64>() / n;
        let std = if ious.len() < 2 {
            0.0
        } else {
            (ious.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        let thr = mean + std;
        for (&i, &iou) in candidates.iter().zip(&ious) {
            let a = &anchors[i];
            if iou >= thr && gt.contains_strict(a.cx, a.cy) && iou > best_iou[i] {
                best_iou[i] = iou;
                out.anchor_to_gt[i] = g as i64;
                out.pos_mask[i] = true;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::generate_anchors;

    #[test]
    fn no_gt_means_all_negative() {
        let a = generate_anchors(64, 64, &[8, 16, 32]);
        let out = atss_assign(&a, &[], 9).unwrap();
        assert!(out.pos_mask.iter().all(|p| !p));
        assert!(atss_assign(&a, &[], 0).is_err());
    }

    #[test]
    fn box_on_one_cell_claims_its_anchor() {
        let a = generate_anchors(64, 64, &[8, 16, 32]);
        // The anchor box of P3 cell (2, 3): center (28, 20), side 64.
        let gt = a[2 * 8 + 3].bbox();
        let out = atss_assign(&a, &[gt], 9).unwrap();
        assert_eq!(out.gt_of(2 * 8 + 3), Some(0));
    }
}
