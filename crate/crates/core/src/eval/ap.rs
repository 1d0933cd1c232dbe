use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::data::FrequencyTier;
use crate::geometry::BBox;

/// COCO-style thresholds 0.50, 0.55, …, 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub image: usize,
    pub bbox: BBox,
    pub score: f64,
}

/// Greedy score-ordered matching. Predictions are visited by descending score (earlier entries
/// first on ties); each takes the unmatched GT of its image with the highest IoU (lowest index on
/// ties) when that IoU reaches `iou_threshold`. Returns the TP flag per visited prediction, in
/// visiting order.
pub fn match_predictions(preds: &[ScoredBox], gts: &[Vec<BBox>], iou_threshold: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score).then(a.cmp(&b)));
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    order
        .into_iter()
        .map(|i| {
            let p = &preds[i];
            let Some(g) = gts.get(p.image) else {
                return false;
            };
            let mut best: Option<(usize, f64)> = None;
            for (j, gt) in g.iter().enumerate() {
                if used[p.image][j] {
                    continue;
                }
                let iou = p.bbox.iou(gt);
                if best.is_none_or(|(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
            match best {
                Some((j, iou)) if iou >= iou_threshold => {
                    used[p.image][j] = true;
                    true
                }
                _ => false,
            }
        })
        .collect()
}

/// Precision/recall after each prediction of a ranked TP/FP sequence.
pub fn pr_curve(tp: &[bool], n_gt: usize) -> Vec<(f64, f64)> {
    let mut hits = 0usize;
    tp.iter()
        .enumerate()
        .map(|(i, &t)| {
            hits += usize::from(t);
            (hits as f64 / n_gt as f64, hits as f64 / (i + 1) as f64)
        })
        .collect()
}

/// All-point interpolated AP of a ranked TP/FP sequence against `n_gt` ground-truth boxes.
pub fn average_precision(tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let curve = pr_curve(tp, n_gt);
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (i, &(r, _)) in curve.iter().enumerate() {
        if r > prev_recall {
            let p_interp = curve[i..].iter().map(|&(_, p)| p).fold(0.0, f64::max);
            ap += (r - prev_recall) * p_interp;
            prev_recall = r;
        }
    }
    ap
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryAp {
    pub ap: f64,
    pub ap50: f64,
    pub n_gt: usize,
    pub tier: Option<FrequencyTier>,
    /// (recall, precision) at IoU 0.5.
    #[serde(skip)]
    pub curve50: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    #[serde(rename = "AP")]
    pub ap: Option<f64>,
    #[serde(rename = "AP_r")]
    pub ap_r: Option<f64>,
    #[serde(rename = "AP_c")]
    pub ap_c: Option<f64>,
    #[serde(rename = "AP_f")]
    pub ap_f: Option<f64>,
    #[serde(rename = "AP50")]
    pub ap50: Option<f64>,
    pub iou_thresholds: Vec<f64>,
    pub per_category: BTreeMap<String, CategoryAp>,
}

impl ApReport {
    /// Mean AP@0.5 over the given categories that have ground truth.
    pub fn mean_ap50<'a>(&self, categories: impl IntoIterator<Item = &'a str>) -> Option<f64> {
        mean(categories.into_iter().filter_map(|c| self.per_category.get(c).map(|r| r.ap50)))
    }
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// One labelled box: ground truth, or a prediction when paired with a score.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBox {
    pub bbox: BBox,
    pub category: String,
}

/// Per-image predictions `(box, category, score)` against per-image ground truth.
/// AP per category is averaged over `iou_thresholds`; categories without ground truth are left
/// out of every average. `tiers` places categories in rare/common/frequent.
pub fn detection_ap(
    predictions: &[Vec<(LabeledBox, f64)>],
    ground_truth: &[Vec<LabeledBox>],
    iou_thresholds: &[f64],
    tiers: &HashMap<String, FrequencyTier>,
) -> ApReport {
    let mut cats: Vec<&str> = ground_truth.iter().flatten().map(|g| g.category.as_str()).collect();
    cats.sort();
    cats.dedup();
    let mut per_category = BTreeMap::new();
    for cat in cats {
        let gts: Vec<Vec<BBox>> = ground_truth
            .iter()
            .map(|g| g.iter().filter(|b| b.category == cat).map(|b| b.bbox).collect())
            .collect();
        let n_gt: usize = gts.iter().map(Vec::len).sum();
        let preds: Vec<ScoredBox> = predictions
            .iter()
            .enumerate()
            .flat_map(|(image, p)| {
                p.iter().filter(|(b, _)| b.category == cat).map(move |(b, s)| ScoredBox {
                    image,
                    bbox: b.bbox,
                    score: *s,
                })
            })
            .collect();
        let ap = mean(
            iou_thresholds
                .iter()
                .map(|&t| average_precision(&match_predictions(&preds, &gts, t), n_gt)),
        )
        .unwrap_or(0.0);
        let tp50 = match_predictions(&preds, &gts, 0.5);
        per_category.insert(
            cat.to_string(),
            CategoryAp {
                ap,
                ap50: average_precision(&tp50, n_gt),
                n_gt,
                tier: tiers.get(cat).copied(),
                curve50: pr_curve(&tp50, n_gt),
            },
        );
    }
    let tier_mean = |t: FrequencyTier| mean(per_category.values().filter(|c| c.tier == Some(t)).map(|c| c.ap));
    ApReport {
        ap: mean(per_category.values().map(|c| c.ap)),
        ap_r: tier_mean(FrequencyTier::Rare),
        ap_c: tier_mean(FrequencyTier::Common),
        ap_f: tier_mean(FrequencyTier::Frequent),
        ap50: mean(per_category.values().map(|c| c.ap50)),
        iou_thresholds: iou_thresholds.to_vec(),
        per_category,
    }
}
