use crate::geometry::{giou, Box4};

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Sigmoid focal loss of one logit.
pub fn focal(logit: f64, target: f64, gamma: f64, alpha: f64) -> f64 {
    let p = sigmoid(logit);
    let (pt, at) = if target == 1.0 { (p, alpha) } else { (1.0 - p, 1.0 - alpha) };
    -at * (1.0 - pt).powf(gamma) * pt.ln()
}

/// Sum of focal terms over a `K × M` matrix divided by max(1, #positives).
pub fn focal_matrix(logits: &[Vec<f64>], targets: &[Vec<f64>], gamma: f64, alpha: f64) -> f64 {
    let mut sum = 0.0;
    let mut npos = 0.0;
    for (lr, tr) in logits.iter().zip(targets) {
        for (&l, &t) in lr.iter().zip(tr) {
            sum += focal(l, t, gamma, alpha);
            npos += t;
        }
    }
    sum / f64::max(1.0, npos)
}

pub fn centerness(px: f64, py: f64, b: &Box4) -> f64 {
    let (l, t, r, bo) = (px - b[0], py - b[1], b[2] - px, b[3] - py);
    ((l.min(r) / l.max(r)) * (t.min(bo) / t.max(bo))).sqrt()
}

pub fn giou_loss(pred: &Box4, gt: &Box4) -> f64 {
    1.0 - giou(pred, gt)
}

pub fn bce(logit: f64, target: f64) -> f64 {
    let p = sigmoid(logit);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

/// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
pub fn sequence_nll(logits: &[Vec<f64>], targets: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &t) in logits.iter().zip(targets) {
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        total += -(row[t].exp() / z).ln();
    }
    total / targets.len() as f64
}

/// Mean over captions of each caption's mean NLL.
pub fn caption_loss(per_caption: &[(Vec<Vec<f64>>, Vec<usize>)]) -> f64 {
    if per_caption.is_empty() {
        return 0.0;
    }
    per_caption.iter().map(|(l, t)| sequence_nll(l, t)).sum::<f64>() / per_caption.len() as f64
}
