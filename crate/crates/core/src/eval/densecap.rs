use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::ap::average_precision;
use crate::eval::meteor::meteor;
use crate::geometry::BBox;

pub const IOU_THRESHOLDS: [f64; 5] = [0.3, 0.4, 0.5, 0.6, 0.7];
pub const METEOR_THRESHOLDS: [f64; 6] = [0.0, 0.05, 0.1, 0.15, 0.2, 0.25];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseCapPrediction {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionedBox {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseCapReport {
    #[serde(rename = "mAP")]
    pub map: f64,
    /// Rows follow [`IOU_THRESHOLDS`], columns [`METEOR_THRESHOLDS`].
    pub per_cell: Vec<Vec<f64>>,
    pub iou_thresholds: Vec<f64>,
    pub meteor_thresholds: Vec<f64>,
    pub num_predictions: usize,
    pub num_ground_truth: usize,
}

/// Dense-captioning mAP over the 5×6 IoU × METEOR grid.
///
/// Predictions are visited by descending score (image order, then list order, on ties). Each
/// takes the unmatched GT of its image with the highest IoU; when that IoU reaches the cell's
/// threshold the GT is consumed, and the prediction counts as a hit iff the caption's METEOR
/// against it also reaches the cell's METEOR threshold.
pub fn densecap_map(predictions: &[Vec<DenseCapPrediction>], ground_truth: &[Vec<CaptionedBox>]) -> Result<DenseCapReport> {
    let n_gt: usize = ground_truth.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return Err(Error::EmptyGroundTruth);
    }
    let mut flat: Vec<(usize, &DenseCapPrediction)> = Vec::new();
    for (image, preds) in predictions.iter().enumerate() {
        flat.extend(preds.iter().map(|p| (image, p)));
    }
    flat.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));

    let mut per_cell = vec![vec![0.0; METEOR_THRESHOLDS.len()]; IOU_THRESHOLDS.len()];
    for (row, &iou_t) in IOU_THRESHOLDS.iter().enumerate() {
        // The matching depends on the IoU threshold only; METEOR is checked afterwards.
        let mut used: Vec<Vec<bool>> = ground_truth.iter().map(|g| vec![false; g.len()]).collect();
        let matched: Vec<Option<f64>> = flat
            .iter()
            .map(|&(image, p)| {
                let gts = ground_truth.get(image)?;
                let mut best: Option<(usize, f64)> = None;
                for (j, g) in gts.iter().enumerate() {
                    if used[image][j] {
                        continue;
                    }
                    let iou = p.bbox.iou(&g.bbox);
                    if best.is_none_or(|(_, b)| iou > b) {
                        best = Some((j, iou));
                    }
                }
                let (j, iou) = best?;
                if iou < iou_t {
                    return None;
                }
                used[image][j] = true;
                Some(meteor(&p.caption, &gts[j].caption))
            })
            .collect();
        for (col, &met_t) in METEOR_THRESHOLDS.iter().enumerate() {
            let tp: Vec<bool> = matched.iter().map(|m| m.is_some_and(|s| s >= met_t)).collect();
            per_cell[row][col] = average_precision(&tp, n_gt);
        }
    }
    let cells = (IOU_THRESHOLDS.len() * METEOR_THRESHOLDS.len()) as f64;
    let map = per_cell.iter().flatten().sum::<f64>() / cells;
    Ok(DenseCapReport {
        map,
        per_cell,
        iou_thresholds: IOU_THRESHOLDS.to_vec(),
        meteor_thresholds: METEOR_THRESHOLDS.to_vec(),
        num_predictions: flat.len(),
        num_ground_truth: n_gt,
    })
}
