use serde::{Deserialize, Serialize};

/// Axis-aligned box `[x, y, w, h]` in image pixels, `(x, y)` top-left.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f32; 4]", into = "[f32; 4]")]
pub struct BBox {
    pub x: f32,
    pub y: f32,
    pub w: f32,
    pub h: f32,
}

impl From<[f32; 4]> for BBox {
    fn from([x, y, w, h]: [f32; 4]) -> Self {
        Self { x, y, w, h }
    }
}

impl From<BBox> for [f32; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl BBox {
    pub fn new(x: f32, y: f32, w: f32, h: f32) -> Self {
        Self { x, y, w, h }
    }

    pub fn from_corners(x1: f32, y1: f32, x2: f32, y2: f32) -> Self {
        Self::new(x1, y1, x2 - x1, y2 - y1)
    }

    pub fn x2(&self) -> f32 {
        self.x + self.w
    }

    pub fn y2(&self) -> f32 {
        self.y + self.h
    }

    pub fn center(&self) -> (f32, f32) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    pub fn area(&self) -> f32 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    /// Positive, finite extent.
    pub fn is_valid(&self) -> bool {
        [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite()) && self.w > 0.0 && self.h > 0.0
    }

    pub fn inside_image(&self, width: u32, height: u32) -> bool {
        self.is_valid() && self.x >= 0.0 && self.y >= 0.0 && self.x2() <= width as f32 && self.y2() <= height as f32
    }

    pub fn intersection(&self, other: &BBox) -> f32 {
        self.overlap64(other) as f32
    }

    /// Intersection area in f64; sums and differences of f32 coordinates are
    /// exact there, so identical boxes overlap by exactly their area.
    fn overlap64(&self, other: &BBox) -> f64 {
        let span = |a0: f32, a1: f32, b0: f32, b1: f32| {
            let (a0, a1, b0, b1) = (f64::from(a0), f64::from(a1), f64::from(b0), f64::from(b1));
            ((a0 + a1).min(b0 + b1) - a0.max(b0)).max(0.0)
        };
        span(self.x, self.w, other.x, other.w) * span(self.y, self.h, other.y, other.h)
    }

    /// Intersection over union; 0 when the union is empty.
    pub fn iou(&self, other: &BBox) -> f32 {
        let inter = self.overlap64(other);
        let area = |b: &BBox| f64::from(b.w.max(0.0)) * f64::from(b.h.max(0.0));
        let union = area(self) + area(other) - inter;
        if union > 0.0 {
            (inter / union) as f32
        } else {
            0.0
        }
    }
}
