//! Axis-aligned boxes in pixel corner form and the detection record built on them.

use std::cmp::Ordering;

use crate::error::{Error, Result};

/// Integer class label. The default class map uses [`SMOKE`] and [`FIRE`].
pub type ClassId = u32;

pub const SMOKE: ClassId = 0;
pub const FIRE: ClassId = 1;

/// Box in image pixel coordinates, origin at the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    /// Builds a box, rejecting non-finite coordinates and inverted extents.
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = Self {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let coords = [self.x_min, self.y_min, self.x_max, self.y_max];
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidBox(format!(
                "non-finite coordinate in {self:?}"
            )));
        }
        if self.x_min > self.x_max || self.y_min > self.y_max {
            return Err(Error::InvalidBox(format!("inverted extent in {self:?}")));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        area(self)
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    pub fn diagonal(&self) -> f64 {
        self.width().hypot(self.height())
    }

    /// Lexicographic order on `(x_min, y_min, x_max, y_max)`, used to break score ties.
    pub fn lex_cmp(&self, other: &Self) -> Ordering {
        self.x_min
            .total_cmp(&other.x_min)
            .then(self.y_min.total_cmp(&other.y_min))
            .then(self.x_max.total_cmp(&other.x_max))
            .then(self.y_max.total_cmp(&other.y_max))
    }
}

pub fn area(b: &BoundingBox) -> f64 {
    (b.x_max - b.x_min) * (b.y_max - b.y_min)
}

/// Intersection over union. Two boxes with zero union area have IoU 0.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Intersects the box with `[0, width] x [0, height]`. A box entirely outside
/// collapses onto the nearest border as a zero-area box.
pub fn clip_to_image(b: &BoundingBox, width: u32, height: u32) -> BoundingBox {
    let w = f64::from(width);
    let h = f64::from(height);
    BoundingBox {
        x_min: b.x_min.clamp(0.0, w),
        y_min: b.y_min.clamp(0.0, h),
        x_max: b.x_max.clamp(0.0, w),
        y_max: b.y_max.clamp(0.0, h),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub class_id: ClassId,
    pub confidence: f64,
}

impl Detection {
    pub fn new(bbox: BoundingBox, class_id: ClassId, confidence: f64) -> Result<Self> {
        let d = Self {
            bbox,
            class_id,
            confidence,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        self.bbox.validate()?;
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::Validation(format!(
                "confidence {} outside [0, 1]",
                self.confidence
            )));
        }
        Ok(())
    }

    /// Descending confidence, then lexicographic box order.
    pub fn rank_cmp(&self, other: &Self) -> Ordering {
        other
            .confidence
            .total_cmp(&self.confidence)
            .then_with(|| self.bbox.lex_cmp(&other.bbox))
    }
}

/// Indices of `dets` in rank order (descending confidence, lexicographic box
/// tie-break, then input position).
pub fn rank_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[a].rank_cmp(&dets[b]).then(a.cmp(&b)));
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(a: f64, b: f64, c: f64, d: f64) -> BoundingBox {
        BoundingBox::new(a, b, c, d).unwrap()
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&bx(0., 0., 10., 10.), &bx(0., 0., 10., 10.)), 1.0);
        assert_eq!(iou(&bx(0., 0., 10., 10.), &bx(10., 10., 20., 20.)), 0.0);
        let v = iou(&bx(0., 0., 10., 10.), &bx(5., 0., 15., 10.));
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn iou_of_degenerate_boxes_is_zero() {
        assert_eq!(iou(&bx(3., 3., 3., 3.), &bx(3., 3., 3., 3.)), 0.0);
        assert_eq!(iou(&bx(3., 3., 3., 9.), &bx(3., 3., 3., 9.)), 0.0);
    }

    #[test]
    fn area_examples() {
        assert_eq!(area(&bx(0., 0., 10., 10.)), 100.0);
        assert_eq!(area(&bx(3., 3., 3., 9.)), 0.0);
        assert_eq!(area(&bx(1.5, 2.0, 4.0, 5.0)), 7.5);
    }

    #[test]
    fn clip_examples() {
        assert_eq!(
            clip_to_image(&bx(-5., -5., 5., 5.), 100, 100),
            bx(0., 0., 5., 5.)
        );
        assert_eq!(
            clip_to_image(&bx(10., 10., 20., 20.), 100, 100),
            bx(10., 10., 20., 20.)
        );
        assert_eq!(
            clip_to_image(&bx(90., 90., 120., 130.), 100, 100),
            bx(90., 90., 100., 100.)
        );
        let outside = clip_to_image(&bx(120., 130., 150., 160.), 100, 100);
        assert_eq!(outside, bx(100., 100., 100., 100.));
        assert_eq!(outside.area(), 0.0);
    }

    #[test]
    fn rejects_invalid_boxes() {
        assert!(BoundingBox::new(5., 0., 4., 1.).is_err());
        assert!(BoundingBox::new(f64::NAN, 0., 4., 1.).is_err());
        assert!(Detection::new(bx(0., 0., 1., 1.), FIRE, 1.2).is_err());
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (
            -100.0..100.0f64,
            -100.0..100.0f64,
            0.0..80.0f64,
            0.0..80.0f64,
        )
            .prop_map(|(x, y, w, h)| BoundingBox::new(x, y, x + w, y + h).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn iou_self_is_one(a in arb_box()) {
            prop_assume!(a.area() > 1e-9);
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn iou_invariant_under_translation_and_scale(
            a in arb_box(), b in arb_box(),
            dx in -50.0..50.0f64, dy in -50.0..50.0f64, s in 0.1..10.0f64,
        ) {
            let t = |r: &BoundingBox| BoundingBox {
                x_min: r.x_min * s + dx,
                y_min: r.y_min * s + dy,
                x_max: r.x_max * s + dx,
                y_max: r.y_max * s + dy,
            };
            prop_assert!((iou(&a, &b) - iou(&t(&a), &t(&b))).abs() < 1e-12);
        }
    }
}
