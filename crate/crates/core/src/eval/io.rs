//! JSONL interchange: one `{"image_id", "box", "score", "caption"|"category"}` object per line.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::densecap::{CaptionedBox, DenseCapPrediction};
use crate::eval::nms::{Detection, DetectionKind};
use crate::geometry::BBox;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub image_id: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
}

impl Record {
    pub fn from_detection(image_id: usize, d: &Detection) -> Self {
        let (category, caption) = match d.kind {
            DetectionKind::Category => (Some(d.label.clone()), None),
            DetectionKind::UnknownCaption => (None, Some(d.label.clone())),
        };
        Self {
            image_id,
            bbox: d.bbox,
            score: Some(d.score),
            category,
            caption,
        }
    }

    pub fn from_densecap(image_id: usize, p: &DenseCapPrediction) -> Self {
        Self {
            image_id,
            bbox: p.bbox,
            score: Some(p.score),
            category: None,
            caption: Some(p.caption.clone()),
        }
    }
}

pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let f = std::fs::File::open(path).map_err(|e| Error::Dataset {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Dataset {
            path: path.to_path_buf(),
            reason: format!("line {}: {e}", i + 1),
        })?);
    }
    Ok(out)
}

/// Group captioned records by image; records without a caption are skipped. Ground-truth
/// records carry no score, predictions default to score 1 when it is missing.
pub fn densecap_by_image(records: &[Record], n_images: usize) -> (Vec<Vec<DenseCapPrediction>>, Vec<Vec<CaptionedBox>>) {
    let mut preds = vec![Vec::new(); n_images];
    let mut boxes = vec![Vec::new(); n_images];
    for r in records {
        let (Some(caption), true) = (&r.caption, r.image_id < n_images) else {
            continue;
        };
        preds[r.image_id].push(DenseCapPrediction {
            bbox: r.bbox,
            score: r.score.unwrap_or(1.0),
            caption: caption.clone(),
        });
        boxes[r.image_id].push(CaptionedBox {
            bbox: r.bbox,
            caption: caption.clone(),
        });
    }
    (preds, boxes)
}
