//! Detection AP, dense-caption mAP, METEOR, NMS, and open-world inference.

pub mod ap;
pub mod densecap;
pub mod inference;
pub mod io;
pub mod meteor;
pub mod nms;
pub mod plot;

pub use ap::{coco_thresholds, detection_ap, ApReport, LabeledBox};
pub use densecap::{densecap_map, CaptionedBox, DenseCapPrediction, DenseCapReport};
pub use inference::{
    dense_caption, two_stage_inference, zero_shot_detect, CategoryList, DenseCapConfig, DetectConfig, ProposalRanking,
    TwoStageConfig,
};
pub use meteor::meteor;
pub use nms::{nms, nms_detections, Detection, DetectionKind};

/// Apply `f` to contiguous chunks of `0..n` on up to `workers` threads; results come back in
/// index order whatever the thread count.
pub fn parallel_chunks<T, F>(n: usize, chunk: usize, workers: usize, f: F) -> crate::Result<Vec<T>>
where
    T: Send,
    F: Fn(std::ops::Range<usize>) -> crate::Result<Vec<T>> + Sync,
{
    let chunk = chunk.max(1);
    let ranges: Vec<std::ops::Range<usize>> = (0..n).step_by(chunk).map(|s| s..(s + chunk).min(n)).collect();
    let workers = workers.max(1).min(ranges.len().max(1));
    if workers == 1 {
        let mut out = Vec::with_capacity(n);
        for r in ranges {
            out.extend(f(r)?);
        }
        return Ok(out);
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut parts: Vec<Option<crate::Result<Vec<T>>>> = (0..ranges.len()).map(|_| None).collect();
    let slots = std::sync::Mutex::new(&mut parts);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                let Some(r) = ranges.get(i) else { break };
                let res = f(r.clone());
                slots.lock().expect("worker panicked")[i] = Some(res);
            });
        }
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p.expect("every chunk ran")?);
    }
    Ok(out)
}
