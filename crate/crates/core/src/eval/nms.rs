use serde::{Deserialize, Serialize};

use crate::geometry::BBox;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionKind {
    Category,
    UnknownCaption,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
    /// Category name, or the generated caption for unknowns.
    pub label: String,
    pub kind: DetectionKind,
    /// Anchor the detection was decoded from.
    pub anchor: usize,
}

/// Greedy suppression: visit boxes by descending score (lower index first on ties) and drop any
/// box whose IoU with an already kept box is at least `iou_threshold`. Returns kept indices in
/// visiting order.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| boxes[k].iou(&boxes[i]) < iou_threshold) {
            keep.push(i);
        }
    }
    keep
}

/// NMS over detections, per label when `per_label` is set, class-agnostic otherwise.
/// Output is sorted by descending score.
pub fn nms_detections(dets: &[Detection], iou_threshold: f64, per_label: bool) -> Vec<Detection> {
    let boxes: Vec<BBox> = dets.iter().map(|d| d.bbox).collect();
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let mut kept: Vec<usize> = if per_label {
        let mut labels: Vec<&str> = dets.iter().map(|d| d.label.as_str()).collect();
        labels.sort();
        labels.dedup();
        let mut all = Vec::new();
        for l in labels {
            let idx: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].label == l).collect();
            let sub_b: Vec<BBox> = idx.iter().map(|&i| boxes[i]).collect();
            let sub_s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
            all.extend(nms(&sub_b, &sub_s, iou_threshold).into_iter().map(|j| idx[j]));
        }
        all
    } else {
        nms(&boxes, &scores, iou_threshold)
    };
    kept.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    kept.into_iter().map(|i| dets[i].clone()).collect()
}
