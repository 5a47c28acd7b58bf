//! Normalized axis-aligned boxes, overlap math and label-preserving
//! geometric transforms.

use serde::{Deserialize, Serialize};

/// Fraction of a box's original area that must stay inside the frame after a
/// transform for the box to be kept.
pub const DEFAULT_MIN_VISIBLE: f64 = 0.1;

/// Corner-form box in normalized frame coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl BBox {
    pub const FULL: BBox = BBox { xmin: 0.0, ymin: 0.0, xmax: 1.0, ymax: 1.0 };

    pub fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Self {
        BBox { xmin, ymin, xmax, ymax }
    }

    /// Builds a box from center form, clipping into the unit frame.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox {
            xmin: (cx - 0.5 * w).clamp(0.0, 1.0),
            ymin: (cy - 0.5 * h).clamp(0.0, 1.0),
            xmax: (cx + 0.5 * w).clamp(0.0, 1.0),
            ymax: (cy + 0.5 * h).clamp(0.0, 1.0),
        }
    }

    pub fn is_valid(&self) -> bool {
        let coords = [self.xmin, self.ymin, self.xmax, self.ymax];
        coords.iter().all(|c| c.is_finite() && (0.0..=1.0).contains(c))
            && self.xmin <= self.xmax
            && self.ymin <= self.ymax
    }

    pub fn width(&self) -> f64 {
        (self.xmax - self.xmin).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.ymax - self.ymin).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.xmin + self.xmax), 0.5 * (self.ymin + self.ymax))
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.xmin, self.ymin, self.xmax, self.ymax]
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

    fn clipped(self) -> BBox {
        BBox {
            xmin: self.xmin.clamp(0.0, 1.0),
            ymin: self.ymin.clamp(0.0, 1.0),
            xmax: self.xmax.clamp(0.0, 1.0),
            ymax: self.ymax.clamp(0.0, 1.0),
        }
    }
}

/// Intersection over union. Degenerate boxes give 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 || inter <= 0.0 {
        0.0
    } else {
        (inter / union).min(1.0)
    }
}

/// Sum of absolute coordinate differences.
pub fn l1_distance(a: &BBox, b: &BBox) -> f64 {
    (a.xmin - b.xmin).abs() + (a.ymin - b.ymin).abs() + (a.xmax - b.xmax).abs() + (a.ymax - b.ymax).abs()
}

/// A single geometric frame transform. Parameters are normalized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GeomTransform {
    HorizontalFlip,
    /// Content moves by `(dx, dy)`; whatever leaves the frame is lost.
    Translate { dx: f64, dy: f64 },
    /// The window is cut out and stretched back to the full frame.
    CropResize { window: BBox },
}

impl GeomTransform {
    pub fn is_identity(&self) -> bool {
        match *self {
            GeomTransform::HorizontalFlip => false,
            GeomTransform::Translate { dx, dy } => dx == 0.0 && dy == 0.0,
            GeomTransform::CropResize { window } => window == BBox::FULL,
        }
    }

    pub fn is_valid(&self) -> bool {
        match *self {
            GeomTransform::HorizontalFlip => true,
            GeomTransform::Translate { dx, dy } => dx.is_finite() && dy.is_finite(),
            GeomTransform::CropResize { window } => window.is_valid() && window.area() > 0.0,
        }
    }
}

/// Maps `b` through `t` with the default visibility rule.
pub fn apply_transform(t: &GeomTransform, b: &BBox) -> Option<BBox> {
    apply_transform_with(t, b, DEFAULT_MIN_VISIBLE)
}

/// Maps `b` through `t`. Returns `None` when less than `min_visible` of the
/// box's area survives inside the new frame (or nothing survives at all).
pub fn apply_transform_with(t: &GeomTransform, b: &BBox, min_visible: f64) -> Option<BBox> {
    match *t {
        GeomTransform::HorizontalFlip => Some(BBox {
            xmin: 1.0 - b.xmax,
            ymin: b.ymin,
            xmax: 1.0 - b.xmin,
            ymax: b.ymax,
        }),
        GeomTransform::Translate { dx, dy } => {
            if dx == 0.0 && dy == 0.0 {
                return Some(*b);
            }
            let moved = BBox {
                xmin: b.xmin + dx,
                ymin: b.ymin + dy,
                xmax: b.xmax + dx,
                ymax: b.ymax + dy,
            };
            keep_visible(b.area(), &moved, &BBox::FULL, min_visible).map(|()| moved.clipped())
        }
        GeomTransform::CropResize { window } => {
            if window == BBox::FULL {
                return Some(*b);
            }
            keep_visible(b.area(), b, &window, min_visible)?;
            let sx = window.width();
            let sy = window.height();
            let mapped = BBox {
                xmin: (b.xmin - window.xmin) / sx,
                ymin: (b.ymin - window.ymin) / sy,
                xmax: (b.xmax - window.xmin) / sx,
                ymax: (b.ymax - window.ymin) / sy,
            };
            Some(mapped.clipped())
        }
    }
}

/// Maps a box through a sequence of transforms, stopping at the first drop.
pub fn apply_sequence(ts: &[GeomTransform], b: &BBox, min_visible: f64) -> Option<BBox> {
    ts.iter().try_fold(*b, |acc, t| apply_transform_with(t, &acc, min_visible))
}

/// Visibility test of `b` against `frame`; returns `Some(())` when kept.
fn keep_visible(orig_area: f64, b: &BBox, frame: &BBox, min_visible: f64) -> Option<()> {
    if orig_area <= 0.0 {
        // zero-area boxes survive iff they still touch the frame
        let inside = b.xmax >= frame.xmin && b.xmin <= frame.xmax && b.ymax >= frame.ymin && b.ymin <= frame.ymax;
        return inside.then_some(());
    }
    let visible = b.intersection(frame);
    (visible > 0.0 && visible >= min_visible * orig_area).then_some(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64).prop_map(|(a, b, c, d)| {
            BBox::new(a.min(c), b.min(d), a.max(c), b.max(d))
        })
    }

    #[test]
    fn iou_examples() {
        let b = BBox::new(0.1, 0.2, 0.4, 0.7);
        assert_eq!(iou(&b, &b), 1.0);
        let a = BBox::new(0.0, 0.0, 0.2, 0.2);
        assert_eq!(iou(&a, &BBox::new(0.5, 0.5, 0.7, 0.7)), 0.0);
        // intersection 0.01, union 0.04 + 0.04 - 0.01
        assert_abs_diff_eq!(iou(&a, &BBox::new(0.1, 0.1, 0.3, 0.3)), 1.0 / 7.0, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_boxes_have_zero_iou() {
        let p = BBox::new(0.3, 0.3, 0.3, 0.3);
        assert_eq!(iou(&p, &p), 0.0);
        assert_eq!(iou(&p, &BBox::FULL), 0.0);
    }

    #[test]
    fn l1_examples() {
        let b = BBox::new(0.1, 0.2, 0.3, 0.4);
        assert_eq!(l1_distance(&b, &b), 0.0);
        assert_eq!(l1_distance(&BBox::FULL, &BBox::new(0.0, 0.0, 1.0, 0.5)), 0.5);
        assert_abs_diff_eq!(
            l1_distance(&BBox::new(0.0, 0.0, 0.2, 0.2), &BBox::new(0.1, 0.1, 0.3, 0.3)),
            0.4,
            epsilon = 1e-12
        );
    }

    #[test]
    fn transform_examples() {
        let flipped = apply_transform(&GeomTransform::HorizontalFlip, &BBox::new(0.1, 0.2, 0.4, 0.5)).unwrap();
        assert_abs_diff_eq!(flipped.xmin, 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(flipped.xmax, 0.9, epsilon = 1e-12);
        assert_eq!((flipped.ymin, flipped.ymax), (0.2, 0.5));

        let b = BBox::new(0.13, 0.2, 0.4, 0.77);
        let full = GeomTransform::CropResize { window: BBox::FULL };
        assert_eq!(apply_transform(&full, &b), Some(b));

        let corner = GeomTransform::CropResize { window: BBox::new(0.5, 0.5, 1.0, 1.0) };
        assert_eq!(apply_transform(&corner, &BBox::new(0.0, 0.0, 0.2, 0.2)), None);
    }

    #[test]
    fn crop_maps_and_drops_slivers() {
        let crop = GeomTransform::CropResize { window: BBox::new(0.5, 0.0, 1.0, 1.0) };
        let inside = apply_transform(&crop, &BBox::new(0.6, 0.1, 0.8, 0.3)).unwrap();
        assert_abs_diff_eq!(inside.xmin, 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(inside.xmax, 0.6, epsilon = 1e-12);
        // 5% of the box width survives: below the 10% rule
        assert_eq!(apply_transform(&crop, &BBox::new(0.31, 0.1, 0.51, 0.3)), None);
        // 50% survives and is clipped to the frame edge
        let half = apply_transform(&crop, &BBox::new(0.4, 0.1, 0.6, 0.3)).unwrap();
        assert_eq!(half.xmin, 0.0);
        assert_abs_diff_eq!(half.xmax, 0.2, epsilon = 1e-12);
        // the threshold is configurable
        assert!(apply_transform_with(&crop, &BBox::new(0.31, 0.1, 0.51, 0.3), 0.01).is_some());
    }

    #[test]
    fn translate_clips() {
        let t = GeomTransform::Translate { dx: 0.3, dy: 0.0 };
        let b = apply_transform(&t, &BBox::new(0.6, 0.1, 0.9, 0.2)).unwrap();
        assert_abs_diff_eq!(b.xmin, 0.9, epsilon = 1e-12);
        assert_eq!(b.xmax, 1.0);
        assert_eq!(apply_transform(&t, &BBox::new(0.75, 0.1, 0.9, 0.2)), None);
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            if a.area() > 0.0 {
                prop_assert_eq!(iou(&a, &a), 1.0);
            }
            if ab == 1.0 {
                prop_assert!(l1_distance(&a, &b) < 1e-9);
            }
        }

        #[test]
        fn double_flip_and_identity_crop_round_trip(b in arb_box()) {
            let once = apply_transform(&GeomTransform::HorizontalFlip, &b).unwrap();
            let twice = apply_transform(&GeomTransform::HorizontalFlip, &once).unwrap();
            prop_assert!(l1_distance(&b, &twice) < 1e-12);
            let same = apply_transform(&GeomTransform::CropResize { window: BBox::FULL }, &b);
            prop_assert_eq!(same, Some(b));
        }

        #[test]
        fn transforms_stay_in_frame(
            b in arb_box(),
            w in arb_box(),
            dx in -0.5..0.5f64,
            dy in -0.5..0.5f64,
        ) {
            let mut ts = vec![GeomTransform::Translate { dx, dy }, GeomTransform::HorizontalFlip];
            if w.area() > 1e-6 {
                ts.push(GeomTransform::CropResize { window: w });
            }
            for t in &ts {
                if let Some(out) = apply_transform(t, &b) {
                    prop_assert!(out.is_valid(), "{:?} -> {:?}", t, out);
                }
            }
        }
    }
}
