//! Axis-aligned boxes in corner and `x,y,w,h` form.

use serde::{Deserialize, Serialize};

/// Coordinate frame a box is expressed in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CoordFrame {
    /// `[0, 1]` relative to the search region.
    Normalized,
    /// Pixel units of a full frame.
    Pixel,
}

/// Corner-form box `(x1, y1, x2, y2)`.
///
/// Boxes straight out of the corner head are tagged `raw` and may have
/// `x2 < x1` or `y2 < y1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub frame: CoordFrame,
    pub raw: bool,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64, frame: CoordFrame) -> Self {
        Self {
            x1,
            y1,
            x2,
            y2,
            frame,
            raw: false,
        }
    }

    pub fn raw(corners: [f64; 4], frame: CoordFrame) -> Self {
        Self {
            x1: corners[0],
            y1: corners[1],
            x2: corners[2],
            y2: corners[3],
            frame,
            raw: true,
        }
    }

    pub fn corners(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn is_valid(&self) -> bool {
        self.x2 >= self.x1 && self.y2 >= self.y1
    }

    /// Width clamped at zero.
    pub fn width(&self) -> f64 {
        (self.x2 - self.x1).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y2 - self.y1).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
            ..*self
        }
    }
}

/// Pixel box in `x, y, w, h` form, the groundtruth file representation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct XywhBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl XywhBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            x: cx - 0.5 * w,
            y: cy - 0.5 * h,
            w,
            h,
        }
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    pub fn to_corners(&self) -> BBox {
        BBox::new(self.x, self.y, self.x + self.w, self.y + self.h, CoordFrame::Pixel)
    }

    pub fn from_corners(b: &BBox) -> Self {
        Self {
            x: b.x1,
            y: b.y1,
            w: b.x2 - b.x1,
            h: b.y2 - b.y1,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0 && self.h > 0.0 && self.x.is_finite() && self.y.is_finite()
    }
}

/// Intersection over union of two boxes, regularized as in the objective.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Center location error: distance between box centers.
pub fn cle(a: &XywhBox, b: &XywhBox) -> f64 {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    (ax - bx).hypot(ay - by)
}
