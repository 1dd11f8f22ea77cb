//! Axis-aligned boxes and the detection records built on them.
//!
//! Coordinates are continuous pixels with the origin at the top-left corner,
//! x to the right and y downward. Boxes are stored center-based and are never
//! clipped to image bounds.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = BBox { cx, cy, w, h };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::InvalidArgument(format!(
                "box ({cx}, {cy}, {w}x{h}) needs finite coordinates and positive size"
            )))
        }
    }

    /// Square box of side `size` centered on `(cx, cy)`.
    pub fn square(cx: f64, cy: f64, size: f64) -> Self {
        BBox { cx, cy, w: size, h: size }
    }

    pub fn is_valid(&self) -> bool {
        self.cx.is_finite() && self.cy.is_finite() && self.w.is_finite() && self.h.is_finite()
            && self.w > 0.0
            && self.h > 0.0
    }

    /// `(x1, y1, x2, y2)`.
    pub fn to_corners(&self) -> [f64; 4] {
        let hw = self.w / 2.0;
        let hh = self.h / 2.0;
        [self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh]
    }

    pub fn from_corners([x1, y1, x2, y2]: [f64; 4]) -> Self {
        BBox {
            cx: (x1 + x2) / 2.0,
            cy: (y1 + y2) / 2.0,
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    pub fn area(&self) -> f64 {
        let [x1, y1, x2, y2] = self.to_corners();
        (x2 - x1) * (y2 - y1)
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let [ax1, ay1, ax2, ay2] = self.to_corners();
        let [bx1, by1, bx2, by2] = other.to_corners();
        let iw = ax2.min(bx2) - ax1.max(bx1);
        let ih = ay2.min(by2) - ay1.max(by1);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }

    pub fn with_size(&self, w: f64, h: f64) -> Self {
        BBox { w, h, ..*self }
    }
}

/// Intersection over union. Boxes that only touch along an edge score 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Euclidean distance between box centers.
pub fn centroid_distance(a: &BBox, b: &BBox) -> f64 {
    (a.cx - b.cx).hypot(a.cy - b.cy)
}

/// Which model (or merge step) produced a detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    DetectorA,
    DetectorB,
    Heatmap,
    Merged,
}

impl Source {
    pub fn as_str(&self) -> &'static str {
        match self {
            Source::DetectorA => "detector-a",
            Source::DetectorB => "detector-b",
            Source::Heatmap => "heatmap",
            Source::Merged => "merged",
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "detector-a" => Ok(Source::DetectorA),
            "detector-b" => Ok(Source::DetectorB),
            "heatmap" => Ok(Source::Heatmap),
            "merged" => Ok(Source::Merged),
            other => Err(Error::InvalidArgument(format!("unknown detection source `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub confidence: f64,
    pub source: Source,
}

impl Detection {
    pub fn new(image_id: impl Into<String>, bbox: BBox, confidence: f64, source: Source) -> Self {
        Detection {
            image_id: image_id.into(),
            bbox,
            confidence,
            source,
        }
    }
}

impl fmt::Display for Detection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}@({}, {}) conf {}",
            self.image_id, self.bbox.cx, self.bbox.cy, self.confidence
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

impl GroundTruth {
    pub fn new(image_id: impl Into<String>, bbox: BBox) -> Self {
        GroundTruth {
            image_id: image_id.into(),
            bbox,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sq(cx: f64, cy: f64) -> BBox {
        BBox::square(cx, cy, 100.0)
    }

    /// Counts unit pixels whose centers fall inside each box. Exact for boxes
    /// with integer corners.
    fn raster_iou(a: &BBox, b: &BBox) -> f64 {
        let [ax1, ay1, ax2, ay2] = a.to_corners();
        let [bx1, by1, bx2, by2] = b.to_corners();
        let lo_x = ax1.min(bx1).floor() as i64;
        let hi_x = ax2.max(bx2).ceil() as i64;
        let lo_y = ay1.min(by1).floor() as i64;
        let hi_y = ay2.max(by2).ceil() as i64;
        let (mut inter, mut union) = (0u64, 0u64);
        for y in lo_y..hi_y {
            for x in lo_x..hi_x {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let in_a = px > ax1 && px < ax2 && py > ay1 && py < ay2;
                let in_b = px > bx1 && px < bx2 && py > by1 && py < by2;
                inter += (in_a && in_b) as u64;
                union += (in_a || in_b) as u64;
            }
        }
        inter as f64 / union as f64
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let b = sq(100.0, 100.0);
        assert_eq!(iou(&b, &b), 1.0);
        assert_eq!(iou(&b, &sq(300.0, 100.0)), 0.0);
    }

    #[test]
    fn iou_half_shift_is_one_third() {
        let a = sq(100.0, 100.0);
        let b = sq(150.0, 100.0);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
        assert!((raster_iou(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn iou_small_shift_matches_raster() {
        let a = sq(100.0, 100.0);
        let b = sq(110.0, 100.0);
        assert!((iou(&a, &b) - 9.0 / 11.0).abs() < 1e-15);
        assert!((raster_iou(&a, &b) - 9.0 / 11.0).abs() < 1e-15);
    }

    #[test]
    fn touching_edges_have_zero_iou() {
        assert_eq!(iou(&sq(100.0, 100.0), &sq(200.0, 100.0)), 0.0);
    }

    #[test]
    fn centroid_distance_examples() {
        assert_eq!(centroid_distance(&sq(5.0, 5.0), &sq(5.0, 5.0)), 0.0);
        assert_eq!(centroid_distance(&sq(0.0, 0.0), &sq(3.0, 4.0)), 5.0);
        assert_eq!(centroid_distance(&sq(100.0, 100.0), &sq(108.0, 100.0)), 8.0);
    }

    #[test]
    fn new_rejects_degenerate_boxes() {
        assert!(BBox::new(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, 1.0, -1.0).is_err());
        assert!(BBox::new(f64::NAN, 0.0, 1.0, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, 1.0, 1.0).is_ok());
    }

    #[test]
    fn source_round_trips_through_str() {
        for s in [Source::DetectorA, Source::DetectorB, Source::Heatmap, Source::Merged] {
            assert_eq!(s.as_str().parse::<Source>().unwrap(), s);
        }
        assert!("yolo".parse::<Source>().is_err());
    }

    // Dyadic coordinates keep corner arithmetic exact.
    fn dyadic_box() -> impl Strategy<Value = BBox> {
        (0i32..65536, 0i32..65536, 1i32..8192, 1i32..8192).prop_map(|(x, y, w, h)| BBox {
            cx: x as f64 / 64.0,
            cy: y as f64 / 64.0,
            w: w as f64 / 32.0,
            h: h as f64 / 32.0,
        })
    }

    fn any_box() -> impl Strategy<Value = BBox> {
        (-500.0..1500.0f64, -500.0..1500.0f64, 1.0..200.0f64, 1.0..200.0f64)
            .prop_map(|(cx, cy, w, h)| BBox { cx, cy, w, h })
    }

    proptest! {
        #[test]
        fn corners_round_trip(b in dyadic_box()) {
            prop_assert_eq!(BBox::from_corners(b.to_corners()), b);
        }

        #[test]
        fn iou_symmetric_and_bounded(a in any_box(), b in any_box()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(iou(&a, &a), 1.0);
        }

        #[test]
        fn iou_below_one_for_distinct_boxes(a in dyadic_box(), b in dyadic_box()) {
            prop_assume!(a != b);
            prop_assert!(iou(&a, &b) < 1.0);
        }

        #[test]
        fn translation_invariance(a in any_box(), b in any_box(), dx in -300.0..300.0f64, dy in -300.0..300.0f64) {
            let shift = |b: &BBox| BBox { cx: b.cx + dx, cy: b.cy + dy, ..*b };
            prop_assert!((iou(&a, &b) - iou(&shift(&a), &shift(&b))).abs() < 1e-9);
            prop_assert!((centroid_distance(&a, &b) - centroid_distance(&shift(&a), &shift(&b))).abs() < 1e-9);
        }

        #[test]
        fn distance_triangle_inequality(a in any_box(), b in any_box(), c in any_box()) {
            let ab = centroid_distance(&a, &b);
            let bc = centroid_distance(&b, &c);
            let ac = centroid_distance(&a, &c);
            prop_assert!(ac <= ab + bc + 1e-9);
            prop_assert_eq!(centroid_distance(&a, &a), 0.0);
        }
    }
}
