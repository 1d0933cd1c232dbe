use serde::{Deserialize, Serialize};

use crate::data::concept::is_detection_concept;
use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Which kind of annotation a sample came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Detection,
    DenseCaption,
}

/// RGB image stored channel-major (`3 × h × w`) as 8-bit intensities.
///
/// Pixel values are exposed as `f32` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![0; 3 * h * w],
        }
    }

    pub fn from_raw(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != 3 * h * w {
            return Err(Error::Shape(format!(
                "image buffer has {} bytes, expected 3*{h}*{w}",
                data.len()
            )));
        }
        Ok(Self { h, w, data })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn raw(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.h + y) * self.w + x] as f32 / 255.0
    }

    pub fn set_rgb(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let plane = self.h * self.w;
        let off = y * self.w + x;
        for (c, v) in rgb.into_iter().enumerate() {
            self.data[c * plane + off] = v;
        }
    }

    pub fn rgb(&self, y: usize, x: usize) -> [u8; 3] {
        let plane = self.h * self.w;
        let off = y * self.w + x;
        [self.data[off], self.data[plane + off], self.data[2 * plane + off]]
    }

    /// Interleaved `h × w × 3` floats in `[0, 1]`, the layout the image encoder consumes.
    pub fn to_hwc_f32(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.data.len());
        for y in 0..self.h {
            for x in 0..self.w {
                for c in 0..3 {
                    out.push(self.get(c, y, x));
                }
            }
        }
        out
    }
}

/// One image with its regions and their concept strings.
#[derive(Debug, Clone, PartialEq)]
pub struct UnifiedSample {
    pub image: Image,
    pub boxes: Vec<BBox>,
    pub concepts: Vec<String>,
    pub source: Source,
    /// Present iff `source == Detection`.
    pub category_ids: Option<Vec<usize>>,
}

impl UnifiedSample {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let (w, h) = (self.image.width() as f32, self.image.height() as f32);
        if self.boxes.len() != self.concepts.len() {
            return Err(Error::InvalidSample(format!(
                "{} boxes but {} concepts",
                self.boxes.len(),
                self.concepts.len()
            )));
        }
        for (i, b) in self.boxes.iter().enumerate() {
            if !b.within(w, h) {
                return Err(Error::InvalidSample(format!(
                    "box {i} {b:?} is outside the {w}x{h} canvas or degenerate"
                )));
            }
        }
        match (self.source, &self.category_ids) {
            (Source::Detection, Some(ids)) => {
                if ids.len() != self.boxes.len() {
                    return Err(Error::InvalidSample(format!(
                        "{} category ids for {} boxes",
                        ids.len(),
                        self.boxes.len()
                    )));
                }
                if let Some(c) = self.concepts.iter().find(|c| !is_detection_concept(c)) {
                    return Err(Error::InvalidSample(format!(
                        "detection concept {c:?} does not follow the \"category, definition.\" template"
                    )));
                }
            }
            (Source::Detection, None) => {
                return Err(Error::InvalidSample(
                    "detection sample without category ids".into(),
                ))
            }
            (Source::DenseCaption, Some(_)) => {
                return Err(Error::InvalidSample(
                    "dense-caption sample must not carry category ids".into(),
                ))
            }
            (Source::DenseCaption, None) => {}
        }
        Ok(())
    }
}
