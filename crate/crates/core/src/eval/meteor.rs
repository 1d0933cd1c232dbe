//! Exact-match METEOR: unigram F-mean with a fragmentation penalty.

use std::collections::HashMap;

use crate::data::tokenizer::words;

/// Maximum match count and the fewest chunks any alignment achieving it needs.
///
/// An alignment maps candidate positions to distinct reference positions holding the same word.
/// A chunk is a maximal run of matches adjacent and in order on both sides.
pub fn align(candidate: &[String], reference: &[String]) -> (usize, usize) {
    if reference.len() > 64 {
        return align_greedy(candidate, reference);
    }
    let mut memo = HashMap::new();
    best(candidate, reference, 0, None, 0, &mut memo)
}

// Lexicographic: more matches first, then fewer chunks.
fn better(a: (usize, usize), b: (usize, usize)) -> bool {
    a.0 > b.0 || (a.0 == b.0 && a.1 < b.1)
}

fn best(
    cand: &[String],
    reference: &[String],
    i: usize,
    prev: Option<usize>,
    used: u64,
    memo: &mut HashMap<(usize, Option<usize>, u64), (usize, usize)>,
) -> (usize, usize) {
    if i == cand.len() {
        return (0, 0);
    }
    if let Some(&v) = memo.get(&(i, prev, used)) {
        return v;
    }
    let mut out = best(cand, reference, i + 1, None, used, memo);
    for (j, r) in reference.iter().enumerate() {
        if used & (1 << j) != 0 || *r != cand[i] {
            continue;
        }
        let (m, c) = best(cand, reference, i + 1, Some(j), used | (1 << j), memo);
        let continues = j > 0 && prev == Some(j - 1);
        let cand_v = (m + 1, c + usize::from(!continues));
        if better(cand_v, out) {
            out = cand_v;
        }
    }
    memo.insert((i, prev, used), out);
    out
}

// Fallback for very long references: first unused occurrence, left to right.
fn align_greedy(cand: &[String], reference: &[String]) -> (usize, usize) {
    let mut used = vec![false; reference.len()];
    let mut prev: Option<usize> = None;
    let (mut m, mut chunks) = (0, 0);
    for w in cand {
        let hit = reference.iter().enumerate().position(|(j, r)| !used[j] && r == w);
        match hit {
            Some(j) => {
                used[j] = true;
                m += 1;
                if !(j > 0 && prev == Some(j - 1)) {
                    chunks += 1;
                }
                prev = Some(j);
            }
            None => prev = None,
        }
    }
    (m, chunks)
}

/// Score from the alignment statistics.
pub fn meteor_from_counts(matches: usize, chunks: usize, cand_len: usize, ref_len: usize) -> f64 {
    if matches == 0 {
        return 0.0;
    }
    let m = matches as f64;
    let p = m / cand_len as f64;
    let r = m / ref_len as f64;
    let f_mean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m).powi(3);
    f_mean * (1.0 - penalty)
}

/// METEOR with exact word matching only.
pub fn meteor(candidate: &str, reference: &str) -> f64 {
    let c = words(candidate);
    let r = words(reference);
    let (m, chunks) = align(&c, &r);
    meteor_from_counts(m, chunks, c.len(), r.len())
}
