use crate::error::{Error, Result};
use crate::math;

/// Axis-aligned box in continuous image coordinates, corners form.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BBox {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl BBox {
    /// Builds a well-ordered box (`xmin < xmax`, `ymin < ymax`, all finite).
    pub fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Result<Self> {
        let finite = [xmin, ymin, xmax, ymax].iter().all(|v| v.is_finite());
        if !finite || !(xmin < xmax) || !(ymin < ymax) {
            return Err(Error::InvalidBox { xmin, ymin, xmax, ymax });
        }
        Ok(Self { xmin, ymin, xmax, ymax })
    }

    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.xmin + self.xmax), 0.5 * (self.ymin + self.ymax))
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = self.xmax.min(other.xmax) - self.xmin.max(other.xmin);
        let h = self.ymax.min(other.ymax) - self.ymin.max(other.ymin);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Intersection over union with continuous areas (no +1 pixel convention).
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        if inter == 0.0 {
            return 0.0;
        }
        inter / (self.area() + other.area() - inter)
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.xmin >= 0.0 && self.ymin >= 0.0 && self.xmax <= width && self.ymax <= height
    }
}

/// Applies `(dx, dy, dw, dh)` regression deltas in centre/size form.
pub fn apply_deltas(b: &BBox, d: &[f64; 4]) -> BBox {
    let (w, h) = (b.width(), b.height());
    let (sx, sy) = (d[0] * w, d[1] * h);
    let gx = 0.5 * (w * math::exp(d[2]) - w);
    let gy = 0.5 * (h * math::exp(d[3]) - h);
    BBox {
        xmin: b.xmin + sx - gx,
        ymin: b.ymin + sy - gy,
        xmax: b.xmax + sx + gx,
        ymax: b.ymax + sy + gy,
    }
}

/// The deltas that move `from` onto `to`; inverse of [`apply_deltas`].
pub fn encode_deltas(from: &BBox, to: &BBox) -> [f64; 4] {
    let (fx, fy) = from.center();
    let (tx, ty) = to.center();
    [
        (tx - fx) / from.width(),
        (ty - fy) / from.height(),
        math::ln(to.width() / from.width()),
        math::ln(to.height() / from.height()),
    ]
}
