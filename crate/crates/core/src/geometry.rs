//! Axis-aligned boxes in pixel coordinates.

use serde::{Deserialize, Serialize};

/// Box as `(x1, y1, x2, y2)`; serialized as a 4-element array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f32; 4]", into = "[f32; 4]")]
pub struct BBox {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl From<[f32; 4]> for BBox {
    fn from(v: [f32; 4]) -> Self {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f32; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl BBox {
    pub const fn new(x1: f32, y1: f32, x2: f32, y2: f32) -> Self {
        Self { x1, y1, x2, y2 }
    }

    /// Square box of side `size` centered on `(cx, cy)`.
    pub fn centered(cx: f32, cy: f32, size: f32) -> Self {
        let h = size / 2.0;
        Self::new(cx - h, cy - h, cx + h, cy + h)
    }

    pub fn width(&self) -> f32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f32 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f32 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f32, f32) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x1.is_finite()
            && self.y1.is_finite()
            && self.x2.is_finite()
            && self.y2.is_finite()
            && self.x1 < self.x2
            && self.y1 < self.y2
    }

    pub fn within(&self, w: f32, h: f32) -> bool {
        self.is_valid() && self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= w && self.y2 <= h
    }

    /// Strict containment of a point (on the boundary does not count).
    pub fn contains_strict(&self, x: f32, y: f32) -> bool {
        x > self.x1 && x < self.x2 && y > self.y1 && y < self.y2
    }

    pub fn intersection(&self, other: &BBox) -> f32 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    fn f64s(&self) -> [f64; 4] {
        [self.x1 as f64, self.y1 as f64, self.x2 as f64, self.y2 as f64]
    }

    fn inter_union_f64(&self, other: &BBox) -> (f64, f64) {
        let [ax1, ay1, ax2, ay2] = self.f64s();
        let [bx1, by1, bx2, by2] = other.f64s();
        let w = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
        let h = (ay2.min(by2) - ay1.max(by1)).max(0.0);
        let inter = w * h;
        let union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
        (inter, union)
    }

    /// Intersection over union, computed in f64. Zero when the union is empty.
    pub fn iou(&self, other: &BBox) -> f64 {
        let (inter, union) = self.inter_union_f64(other);
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Generalized IoU: `IoU - |C \ (A ∪ B)| / |C|` with `C` the enclosing box.
    pub fn giou(&self, other: &BBox) -> f64 {
        let (inter, union) = self.inter_union_f64(other);
        let [ax1, ay1, ax2, ay2] = self.f64s();
        let [bx1, by1, bx2, by2] = other.f64s();
        let enclosing = (ax2.max(bx2) - ax1.min(bx1)) * (ay2.max(by2) - ay1.min(by1));
        let iou = if union > 0.0 { inter / union } else { 0.0 };
        if enclosing <= 0.0 {
            return iou;
        }
        iou - (enclosing - union) / enclosing
    }

    pub fn scale(&self, s: f32) -> BBox {
        BBox::new(self.x1 * s, self.y1 * s, self.x2 * s, self.y2 * s)
    }

    pub fn to_array(self) -> [f32; 4] {
        self.into()
    }
}
