//! Query-based set-prediction head: decoder, matching, loss and top-k
//! decoding.

mod decoder;
mod hungarian;
mod loss;

pub use decoder::{Decoder, HeadConfig};
pub use hungarian::{hungarian_match, MatchAssignment};
pub use loss::{build_cost_matrix, match_batch, postprocess_topk, set_loss, LossTerms, LossWeights};

use crate::error::{Error, Result};

/// Axis-aligned box in normalized center form.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
    }

    /// `(x1, y1, x2, y2)`.
    pub fn corners(&self) -> [f64; 4] {
        [self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.cx + self.w / 2.0, self.cy + self.h / 2.0]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.cx, self.cy, self.w, self.h].iter().all(|v| v.is_finite());
        if !finite || self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::DegenerateBox { w: self.w, h: self.h });
        }
        Ok(())
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self::new(self.cx + dx, self.cy + dy, self.w, self.h)
    }
}

/// Intersection, union and enclosing-hull areas.
fn overlap(a: &BBox, b: &BBox) -> (f64, f64, f64) {
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let hull = (ax2.max(bx2) - ax1.min(bx1)) * (ay2.max(by2) - ay1.min(by1));
    (inter, union, hull)
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (inter, union, _) = overlap(a, b);
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Generalized IoU, `IoU − |hull \ union| / |hull|`.
pub fn giou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(giou_unchecked(a, b))
}

/// GIoU for a prediction that may have collapsed to zero extent; `b` must be
/// valid so that the union is positive.
pub(crate) fn giou_unchecked(a: &BBox, b: &BBox) -> f64 {
    let (inter, union, hull) = overlap(a, b);
    inter / union - (hull - union) / hull
}

/// A ground-truth object.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Target {
    pub class_id: usize,
    pub bbox: BBox,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub class_id: usize,
    pub score: f64,
    pub bbox: BBox,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn giou_basics() {
        let a = BBox::new(0.5, 0.5, 0.2, 0.4);
        assert_eq!(giou(&a, &a).unwrap(), 1.0);
        let b = a.translated(0.4, 0.0);
        let g = giou(&a, &b).unwrap();
        assert_eq!(iou(&a, &b), 0.0);
        assert!(g < 0.0);
        // hull is 0.6 x 0.4, union 2 · 0.08
        assert!((g - (0.0 - (0.24 - 0.16) / 0.24)).abs() < 1e-12);
        assert!(giou(&a, &BBox::new(0.5, 0.5, 0.0, 0.1)).is_err());
    }
}
