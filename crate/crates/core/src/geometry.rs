//! Axis-aligned bounding-box arithmetic.
//!
//! Boxes are stored in corner form. COCO `[x, y, w, h]` boxes are converted
//! on the way in and out through [`BBox::from_xywh`] and [`BBox::to_xywh`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned rectangle in pixel coordinates.
///
/// Zero-area boxes are allowed; negative extents and non-finite
/// coordinates are rejected by [`BBox::new`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let invalid = |reason| Error::InvalidBox {
            x_min,
            y_min,
            x_max,
            y_max,
            reason,
        };
        if ![x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite()) {
            return Err(invalid("non-finite coordinate"));
        }
        if x_max < x_min || y_max < y_min {
            return Err(invalid("negative extent"));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// Builds a box from COCO `(x, y, width, height)`.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(w.is_finite() && h.is_finite()) || w < 0.0 || h < 0.0 {
            return Err(Error::InvalidBox {
                x_min: x,
                y_min: y,
                x_max: x + w,
                y_max: y + h,
                reason: "negative or non-finite width/height",
            });
        }
        Self::new(x, y, x + w, y + h)
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.width(), self.height()]
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn y_min(&self) -> f64 {
        self.y_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn is_degenerate(&self) -> bool {
        self.area() == 0.0
    }

    /// Overlap region, or `None` when the boxes do not touch.
    pub fn intersection(&self, other: &BBox) -> Option<BBox> {
        let x_min = self.x_min.max(other.x_min);
        let y_min = self.y_min.max(other.y_min);
        let x_max = self.x_max.min(other.x_max);
        let y_max = self.y_max.min(other.y_max);
        (x_max >= x_min && y_max >= y_min).then_some(BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// Smallest box containing both inputs.
    pub fn enclosing(&self, other: &BBox) -> BBox {
        BBox {
            x_min: self.x_min.min(other.x_min),
            y_min: self.y_min.min(other.y_min),
            x_max: self.x_max.max(other.x_max),
            y_max: self.y_max.max(other.y_max),
        }
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Result<BBox> {
        BBox::new(
            self.x_min + dx,
            self.y_min + dy,
            self.x_max + dx,
            self.y_max + dy,
        )
    }

    /// Clips the box to `[0, width] x [0, height]`. Returns the clipped box
    /// and whether anything changed.
    pub fn clamp_to(&self, width: f64, height: f64) -> (BBox, bool) {
        let clip = |v: f64, hi: f64| v.clamp(0.0, hi);
        let clamped = BBox {
            x_min: clip(self.x_min, width),
            y_min: clip(self.y_min, height),
            x_max: clip(self.x_max, width),
            y_max: clip(self.y_max, height),
        };
        (clamped, clamped != *self)
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x_min, b.y_min, b.x_max, b.y_max]
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

fn intersection_area(a: &BBox, b: &BBox) -> f64 {
    a.intersection(b).map_or(0.0, |i| i.area())
}

/// Intersection over union. Two degenerate boxes give 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Generalized IoU: `iou - (|C| - |a ∪ b|) / |C|` with `C` the enclosing box.
pub fn giou(a: &BBox, b: &BBox) -> Result<f64> {
    let hull = a.enclosing(b).area();
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 || hull <= 0.0 {
        return Err(Error::DegenerateGiou);
    }
    Ok(inter / union - (hull - union) / hull)
}
