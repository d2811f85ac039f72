//! Axis-aligned box arithmetic in corner form.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An axis-aligned rectangle `(x1, y1, x2, y2)` in pixel coordinates.
///
/// Zero-area boxes are valid. Construct through [`BBox::new`] to have the
/// invariants checked; the fields stay public for cheap pattern matching.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::InvalidBox { x1, y1, x2, y2 })
        }
    }

    /// Builds a box from its center and size.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite()) && self.x2 >= self.x1 && self.y2 >= self.y1
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn area(&self) -> f64 {
        area(self)
    }

    pub fn is_degenerate(&self) -> bool {
        self.area() == 0.0
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }

    /// Scales every coordinate about the origin.
    pub fn scale(&self, s: f64) -> Self {
        Self {
            x1: self.x1 * s,
            y1: self.y1 * s,
            x2: self.x2 * s,
            y2: self.y2 * s,
        }
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }

    /// Smallest box enclosing both.
    pub fn hull(&self, other: &Self) -> Self {
        Self {
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
            x2: self.x2.max(other.x2),
            y2: self.y2.max(other.y2),
        }
    }

    pub fn intersection_area(&self, other: &Self) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Sum of absolute corner differences.
    pub fn l1_distance(&self, other: &Self) -> f64 {
        (self.x1 - other.x1).abs()
            + (self.y1 - other.y1).abs()
            + (self.x2 - other.x2).abs()
            + (self.y2 - other.y2).abs()
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

pub fn area(b: &BBox) -> f64 {
    let w = b.x2 - b.x1;
    let h = b.y2 - b.y1;
    if w <= 0.0 || h <= 0.0 {
        0.0
    } else {
        w * h
    }
}

/// Intersection over union. Two degenerate boxes have IoU 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Generalized IoU: `iou - (hull - union) / hull`.
pub fn giou(a: &BBox, b: &BBox) -> Result<f64> {
    let inter = a.intersection_area(b);
    let union = area(a) + area(b) - inter;
    let hull = area(&a.hull(b));
    if union <= 0.0 || hull <= 0.0 {
        return Err(Error::UndefinedGeometry);
    }
    Ok(inter / union - (hull - union) / hull)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn area_examples() {
        assert_eq!(area(&bx(0.0, 0.0, 2.0, 2.0)), 4.0);
        assert_eq!(area(&bx(1.0, 1.0, 1.0, 5.0)), 0.0);
        assert_eq!(area(&bx(0.0, 0.0, 3.0, 7.0)), 21.0);
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&bx(0.0, 0.0, 1.0, 1.0), &bx(5.0, 5.0, 6.0, 6.0)), 0.0);
        let v = iou(&a, &bx(1.0, 1.0, 3.0, 3.0));
        assert!((v - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn iou_of_degenerate_pair_is_zero() {
        let p = bx(1.0, 1.0, 1.0, 1.0);
        assert_eq!(iou(&p, &p), 0.0);
    }

    #[test]
    fn giou_examples() {
        let a = bx(0.0, 0.0, 2.0, 2.0);
        assert_eq!(giou(&a, &a).unwrap(), 1.0);
        let v = giou(&bx(0.0, 0.0, 1.0, 1.0), &bx(2.0, 0.0, 3.0, 1.0)).unwrap();
        assert!((v + 1.0 / 3.0).abs() < 1e-12);
        let v = giou(&a, &bx(1.0, 1.0, 3.0, 3.0)).unwrap();
        assert!((v + 5.0 / 63.0).abs() < 1e-12);
    }

    #[test]
    fn giou_of_degenerate_pair_is_an_error() {
        let p = bx(0.0, 0.0, 0.0, 3.0);
        let q = bx(1.0, 1.0, 4.0, 1.0);
        assert_eq!(giou(&p, &q), Err(Error::UndefinedGeometry));
        assert!(giou(&p, &bx(0.0, 0.0, 1.0, 1.0)).is_ok());
    }

    #[test]
    fn rejects_inverted_and_non_finite() {
        assert!(BBox::new(2.0, 0.0, 1.0, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::NAN, 1.0).is_err());
        assert!(BBox::new(0.0, f64::INFINITY, 1.0, 1.0).is_err());
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-50.0..50.0f64, -50.0..50.0f64, 0.1..40.0f64, 0.1..40.0f64).prop_map(|(x, y, w, h)| bx(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let (i_ab, i_ba) = (iou(&a, &b), iou(&b, &a));
            let (g_ab, g_ba) = (giou(&a, &b).unwrap(), giou(&b, &a).unwrap());
            prop_assert_eq!(i_ab, i_ba);
            prop_assert!((g_ab - g_ba).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&i_ab));
            prop_assert!(g_ab > -1.0 && g_ab <= 1.0);
            prop_assert!(g_ab <= i_ab + 1e-12);
        }

        #[test]
        fn translation_invariant(a in arb_box(), b in arb_box(), dx in -100.0..100.0f64, dy in -100.0..100.0f64) {
            let (ta, tb) = (a.translate(dx, dy), b.translate(dx, dy));
            prop_assert!((iou(&a, &b) - iou(&ta, &tb)).abs() < 1e-9);
            prop_assert!((giou(&a, &b).unwrap() - giou(&ta, &tb).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn scale_invariant(a in arb_box(), b in arb_box(), s in 0.05..20.0f64) {
            let (sa, sb) = (a.scale(s), b.scale(s));
            prop_assert!((iou(&a, &b) - iou(&sa, &sb)).abs() < 1e-9);
            prop_assert!((giou(&a, &b).unwrap() - giou(&sa, &sb).unwrap()).abs() < 1e-9);
        }
    }
}
