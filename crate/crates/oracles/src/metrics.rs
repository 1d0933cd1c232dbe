use crate::geometry::{iou, Box4};

pub fn words(s: &str) -> Vec<String> {
    s.replace(',', " ")
        .split_whitespace()
        .map(|w| w.chars().filter(|c| c.is_alphanumeric()).collect::<String>().to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Every alignment of candidate to reference positions with equal words, each reference
/// position used at most once. Returns (matches, chunks) for each.
fn all_alignments(c: &[String], r: &[String]) -> Vec<(usize, usize)> {
    fn rec(c: &[String], r: &[String], i: usize, map: &mut Vec<Option<usize>>, out: &mut Vec<(usize, usize)>) {
        if i == c.len() {
            let mut m = 0;
            let mut chunks = 0;
            for k in 0..map.len() {
                if let Some(j) = map[k] {
                    m += 1;
                    let joined = k > 0 && j > 0 && map[k - 1] == Some(j - 1);
                    if !joined {
                        chunks += 1;
                    }
                }
            }
            out.push((m, chunks));
            return;
        }
        map.push(None);
        rec(c, r, i + 1, map, out);
        map.pop();
        for j in 0..r.len() {
            if r[j] == c[i] && !map.contains(&Some(j)) {
                map.push(Some(j));
                rec(c, r, i + 1, map, out);
                map.pop();
            }
        }
    }
    let mut out = Vec::new();
    rec(c, r, 0, &mut Vec::new(), &mut out);
    out
}

pub fn meteor(candidate: &str, reference: &str) -> f64 {
    let c = words(candidate);
    let r = words(reference);
    let aligns = all_alignments(&c, &r);
    let m = aligns.iter().map(|a| a.0).max().unwrap_or(0);
    if m == 0 {
        return 0.0;
    }
    let chunks = aligns.iter().filter(|a| a.0 == m).map(|a| a.1).min().unwrap();
    let p = m as f64 / c.len() as f64;
    let rc = m as f64 / r.len() as f64;
    let f = 10.0 * p * rc / (rc + 9.0 * p);
    f * (1.0 - 0.5 * (chunks as f64 / m as f64).powi(3))
}

/// AP from ranked hit flags: sum over each hit of (1/n_gt) times the best precision reached at
/// that hit's rank or later.
pub fn ap(hits: &[bool], n_gt: usize) -> f64 {
    let prec: Vec<f64> = (0..hits.len())
        .map(|i| hits[..=i].iter().filter(|&&h| h).count() as f64 / (i + 1) as f64)
        .collect();
    let mut total = 0.0;
    for i in 0..hits.len() {
        if hits[i] {
            let best = prec[i..].iter().cloned().fold(0.0, f64::max);
            total += best / n_gt as f64;
        }
    }
    total
}

/// Positions of `scores` sorted descending with earlier positions first on ties.
fn ranked(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    // insertion sort: stable and obviously so
    for i in 1..idx.len() {
        let mut j = i;
        while j > 0 && scores[idx[j - 1]] < scores[idx[j]] {
            idx.swap(j - 1, j);
            j -= 1;
        }
    }
    idx
}

/// Greedy hits for predictions `(image, box, score)` against per-image GT, visiting by
/// descending score. `accept(pred, gt)` decides a hit once the best-IoU free GT is consumed.
fn greedy<F: Fn(usize, usize, usize) -> bool>(
    preds: &[(usize, Box4, f64)],
    gts: &[Vec<Box4>],
    iou_t: f64,
    accept: F,
) -> Vec<bool> {
    let order = ranked(&preds.iter().map(|p| p.2).collect::<Vec<_>>());
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut hits = Vec::new();
    for i in order {
        let (img, b, _) = preds[i];
        let mut best: Option<usize> = None;
        for j in 0..gts[img].len() {
            if taken[img][j] {
                continue;
            }
            if best.is_none_or(|k| iou(&b, &gts[img][j]) > iou(&b, &gts[img][k])) {
                best = Some(j);
            }
        }
        match best {
            Some(j) if iou(&b, &gts[img][j]) >= iou_t => {
                taken[img][j] = true;
                hits.push(accept(i, img, j));
            }
            _ => hits.push(false),
        }
    }
    hits
}

/// Single-category AP at one IoU threshold.
pub fn detection_ap(preds: &[(usize, Box4, f64)], gts: &[Vec<Box4>], iou_t: f64) -> f64 {
    let n: usize = gts.iter().map(Vec::len).sum();
    ap(&greedy(preds, gts, iou_t, |_, _, _| true), n)
}

pub const DENSECAP_IOU: [f64; 5] = [0.3, 0.4, 0.5, 0.6, 0.7];
pub const DENSECAP_METEOR: [f64; 6] = [0.0, 0.05, 0.1, 0.15, 0.2, 0.25];

/// Dense-caption mAP, each of the 30 cells computed from scratch.
pub fn densecap_map(preds: &[(usize, Box4, f64, String)], gts: &[Vec<(Box4, String)>]) -> Option<(f64, Vec<Vec<f64>>)> {
    let n: usize = gts.iter().map(Vec::len).sum();
    if n == 0 {
        return None;
    }
    let boxes: Vec<(usize, Box4, f64)> = preds.iter().map(|p| (p.0, p.1, p.2)).collect();
    let gt_boxes: Vec<Vec<Box4>> = gts.iter().map(|g| g.iter().map(|x| x.0).collect()).collect();
    let mut cells = Vec::new();
    for &it in &DENSECAP_IOU {
        let mut row = Vec::new();
        for &mt in &DENSECAP_METEOR {
            let hits = greedy(&boxes, &gt_boxes, it, |i, img, j| meteor(&preds[i].3, &gts[img][j].1) >= mt);
            row.push(ap(&hits, n));
        }
        cells.push(row);
    }
    let mean = cells.iter().flatten().sum::<f64>() / 30.0;
    Some((mean, cells))
}

/// Repeatedly take the best remaining box (lowest index on ties) and discard everything
/// overlapping it at `t` or more. Returns picked indices in picking order.
pub fn nms(boxes: &[Box4], scores: &[f64], t: f64) -> Vec<usize> {
    let mut remaining: Vec<usize> = (0..boxes.len()).collect();
    let mut picked = Vec::new();
    while !remaining.is_empty() {
        let mut best = remaining[0];
        for &i in &remaining {
            if scores[i] > scores[best] || (scores[i] == scores[best] && i < best) {
                best = i;
            }
        }
        picked.push(best);
        remaining.retain(|&i| i != best && iou(&boxes[i], &boxes[best]) < t);
    }
    picked
}
