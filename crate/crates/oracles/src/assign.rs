use crate::geometry::{iou, Box4};

/// An anchor as the assigner sees it: center, square side, pyramid level.
#[derive(Debug, Clone, Copy)]
pub struct RefAnchor {
    pub cx: f64,
    pub cy: f64,
    pub side: f64,
    pub level: usize,
}

impl RefAnchor {
    pub fn bbox(&self) -> Box4 {
        let h = self.side / 2.0;
        [self.cx - h, self.cy - h, self.cx + h, self.cy + h]
    }
}

fn dist(a: &RefAnchor, g: &Box4) -> f64 {
    let gx = (g[0] + g[2]) / 2.0;
    let gy = (g[1] + g[3]) / 2.0;
    ((a.cx - gx).powi(2) + (a.cy - gy).powi(2)).sqrt()
}

/// Anchor `i` is a candidate for `g` when fewer than `topk` anchors of its level come strictly
/// before it in (distance, index) order.
fn is_candidate(anchors: &[RefAnchor], i: usize, g: &Box4, topk: usize) -> bool {
    let di = dist(&anchors[i], g);
    let ahead = anchors
        .iter()
        .enumerate()
        .filter(|(j, a)| a.level == anchors[i].level && (dist(a, g) < di || (dist(a, g) == di && *j < i)))
        .count();
    ahead < topk
}

/// GT index per anchor (or -1): adaptive threshold mean + sample std over the candidate IoUs,
/// center strictly inside, highest IoU then lowest GT index wins.
pub fn atss(anchors: &[RefAnchor], gts: &[Box4], topk: usize) -> Vec<i64> {
    let positive_for: Vec<Vec<bool>> = gts
        .iter()
        .map(|g| {
            let cand: Vec<usize> = (0..anchors.len()).filter(|&i| is_candidate(anchors, i, g, topk)).collect();
            let ious: Vec<f64> = cand.iter().map(|&i| iou(&anchors[i].bbox(), g)).collect();
            let n = ious.len() as f64;
            let mean = ious.iter().sum::<f64>() / n;
            let var = if ious.len() > 1 {
                ious.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            let thr = mean + var.sqrt();
            (0..anchors.len())
                .map(|i| {
                    let a = &anchors[i];
                    cand.contains(&i)
                        && iou(&a.bbox(), g) >= thr
                        && a.cx > g[0]
                        && a.cx < g[2]
                        && a.cy > g[1]
                        && a.cy < g[3]
                })
                .collect()
        })
        .collect();
    (0..anchors.len())
        .map(|i| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if !positive_for[g][i] {
                    continue;
                }
                let v = iou(&anchors[i].bbox(), gt);
                match best {
                    Some((_, b)) if v <= b => {}
                    _ => best = Some((g, v)),
                }
            }
            best.map_or(-1, |(g, _)| g as i64)
        })
        .collect()
}
