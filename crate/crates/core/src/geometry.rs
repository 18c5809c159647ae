//! Axis-aligned boxes in center parametrization and the R-CNN style
//! regression codecs shared by the box head and the tracking head.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box stored as center `(x, y)` plus width and height, in pixels.
///
/// Serialized as the four-element array `[x, y, w, h]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

impl BBox {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    /// Builds a box from its corner view `(x1, y1, x2, y2)`.
    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox {
            x: 0.5 * (x1 + x2),
            y: 0.5 * (y1 + y2),
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    /// Corner view `(x1, y1, x2, y2)`.
    pub fn corners(&self) -> [f64; 4] {
        let hw = 0.5 * self.w;
        let hh = 0.5 * self.h;
        [self.x - hw, self.y - hh, self.x + hw, self.y + hh]
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn is_valid(&self) -> bool {
        self.x.is_finite()
            && self.y.is_finite()
            && self.w.is_finite()
            && self.h.is_finite()
            && self.w > 0.0
            && self.h > 0.0
    }

    /// Returns the box unchanged if it has finite coordinates and positive size.
    pub fn validated(self) -> Result<Self> {
        if self.is_valid() {
            Ok(self)
        } else {
            Err(Error::InvalidBox(self.to_array()))
        }
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        BBox::new(self.x + dx, self.y + dy, self.w, self.h)
    }

    /// Intersects the box with `[0, width] x [0, height]`; `None` if nothing is left.
    pub fn clipped(&self, width: f64, height: f64) -> Option<Self> {
        let [x1, y1, x2, y2] = self.corners();
        let c = BBox::from_corners(x1.max(0.0), y1.max(0.0), x2.min(width), y2.min(height));
        c.is_valid().then_some(c)
    }

    /// IoU that assumes both boxes are valid.
    pub(crate) fn iou_unchecked(&self, other: &BBox) -> f64 {
        let [ax1, ay1, ax2, ay2] = self.corners();
        let [bx1, by1, bx2, by2] = other.corners();
        let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
        let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
        let inter = iw * ih;
        if inter <= 0.0 {
            return 0.0;
        }
        // areas from the same corner view, so identical boxes give exactly 1
        let union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Intersection-over-union of two boxes. Zero-area boxes are rejected.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validated()?;
    b.validated()?;
    Ok(a.iou_unchecked(b))
}

/// Normalized translation and log size ratio between two boxes.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct TrackDelta {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

/// The box head uses the same parametrization, anchored at the RoI.
pub type BoxDelta = TrackDelta;

impl From<[f64; 4]> for TrackDelta {
    fn from(v: [f64; 4]) -> Self {
        TrackDelta::new(v[0], v[1], v[2], v[3])
    }
}

impl From<TrackDelta> for [f64; 4] {
    fn from(d: TrackDelta) -> Self {
        d.to_array()
    }
}

impl TrackDelta {
    pub const ZERO: TrackDelta = TrackDelta::new(0.0, 0.0, 0.0, 0.0);

    pub const fn new(dx: f64, dy: f64, dw: f64, dh: f64) -> Self {
        TrackDelta { dx, dy, dw, dh }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Regression target that carries `from` onto `to`.
///
/// `dx` is normalized by the width and `dy` by the height of `from`; the size
/// terms are log ratios.
pub fn encode_track(from: &BBox, to: &BBox) -> Result<TrackDelta> {
    from.validated()?;
    to.validated()?;
    Ok(TrackDelta {
        dx: (to.x - from.x) / from.w,
        dy: (to.y - from.y) / from.h,
        dw: (to.w / from.w).ln(),
        dh: (to.h / from.h).ln(),
    })
}

/// Inverse of [`encode_track`].
pub fn decode_track(from: &BBox, delta: &TrackDelta) -> Result<BBox> {
    from.validated()?;
    if !delta.is_finite() {
        return Err(Error::NonFinite(format!("track delta {delta:?}")));
    }
    BBox {
        x: from.x + delta.dx * from.w,
        y: from.y + delta.dy * from.h,
        w: from.w * delta.dw.exp(),
        h: from.h * delta.dh.exp(),
    }
    .validated()
}

/// Box-regression target of `target` relative to `anchor`.
pub fn encode_box(anchor: &BBox, target: &BBox) -> Result<BoxDelta> {
    encode_track(anchor, target)
}

pub fn decode_box(anchor: &BBox, delta: &BoxDelta) -> Result<BBox> {
    decode_track(anchor, delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn iou_fixtures() {
        let a = BBox::new(1.0, 1.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &BBox::new(10.0, 10.0, 2.0, 2.0)).unwrap(), 0.0);
        // intersection 2, union 6
        assert_relative_eq!(
            iou(&a, &BBox::new(2.0, 1.0, 2.0, 2.0)).unwrap(),
            1.0 / 3.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn iou_rejects_degenerate() {
        let a = BBox::new(1.0, 1.0, 2.0, 2.0);
        assert!(matches!(
            iou(&a, &BBox::new(1.0, 1.0, 0.0, 2.0)),
            Err(Error::InvalidBox(_))
        ));
        assert!(iou(&BBox::new(1.0, 1.0, 2.0, -1.0), &a).is_err());
        assert!(iou(&BBox::new(f64::NAN, 1.0, 2.0, 1.0), &a).is_err());
    }

    #[test]
    fn corner_roundtrip_on_dyadic_values() {
        let b = BBox::new(3.5, -2.25, 4.0, 1.5);
        let [x1, y1, x2, y2] = b.corners();
        assert_eq!(BBox::from_corners(x1, y1, x2, y2), b);
    }

    #[test]
    fn encode_track_fixtures() {
        let b = BBox::new(3.0, 4.0, 5.0, 6.0);
        assert_eq!(encode_track(&b, &b).unwrap(), TrackDelta::ZERO);

        let d = encode_track(
            &BBox::new(10.0, 10.0, 20.0, 10.0),
            &BBox::new(14.0, 12.0, 40.0, 10.0),
        )
        .unwrap();
        assert_relative_eq!(d.dx, 0.2, epsilon = 1e-15);
        // dy is normalized by the first box's height (10), not its width
        assert_relative_eq!(d.dy, 0.2, epsilon = 1e-15);
        assert_relative_eq!(d.dw, 2f64.ln(), epsilon = 1e-15);
        assert_eq!(d.dh, 0.0);

        let e = std::f64::consts::E;
        let d = encode_track(&BBox::new(0.0, 0.0, 1.0, 1.0), &BBox::new(0.0, 0.0, e, 1.0)).unwrap();
        assert_relative_eq!(d.dw, 1.0, epsilon = 1e-15);
        assert_eq!((d.dx, d.dy, d.dh), (0.0, 0.0, 0.0));
    }

    #[test]
    fn decode_track_fixtures() {
        let b = BBox::new(10.0, 10.0, 20.0, 10.0);
        assert_eq!(decode_track(&b, &TrackDelta::ZERO).unwrap(), b);
        let out = decode_track(&b, &TrackDelta::new(0.2, 0.2, 2f64.ln(), 0.0)).unwrap();
        assert_relative_eq!(out.x, 14.0, epsilon = 1e-12);
        assert_relative_eq!(out.y, 12.0, epsilon = 1e-12);
        assert_relative_eq!(out.w, 40.0, epsilon = 1e-12);
        assert_relative_eq!(out.h, 10.0, epsilon = 1e-12);
    }

    #[test]
    fn box_codec_shares_the_track_formula() {
        let anchor = BBox::new(10.0, 10.0, 20.0, 10.0);
        let target = BBox::new(14.0, 12.0, 40.0, 10.0);
        assert_eq!(encode_box(&anchor, &anchor).unwrap(), TrackDelta::ZERO);
        assert_eq!(
            encode_box(&anchor, &target).unwrap(),
            encode_track(&anchor, &target).unwrap()
        );
    }

    #[test]
    fn codec_rejects_bad_input() {
        let b = BBox::new(0.0, 0.0, 1.0, 1.0);
        assert!(encode_track(&b, &BBox::new(0.0, 0.0, 0.0, 1.0)).is_err());
        assert!(decode_track(&b, &TrackDelta::new(f64::INFINITY, 0.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn box_serializes_as_array() {
        let b = BBox::new(1.5, 2.0, 3.0, 4.25);
        let s = serde_json::to_string(&b).unwrap();
        assert_eq!(s, "[1.5,2.0,3.0,4.25]");
        assert_eq!(serde_json::from_str::<BBox>(&s).unwrap(), b);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-100.0..100.0f64, -100.0..100.0f64, 0.5..80.0f64, 0.5..80.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, w, h))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b).unwrap();
            let ba = iou(&b, &a).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(iou(&a, &a).unwrap(), 1.0);
        }

        #[test]
        fn track_codec_inverts(a in arb_box(), b in arb_box()) {
            let back = decode_track(&a, &encode_track(&a, &b).unwrap()).unwrap();
            for (u, v) in back.to_array().iter().zip(b.to_array()) {
                prop_assert!((u - v).abs() <= 1e-9 * v.abs().max(1.0));
            }
        }

        #[test]
        fn encode_track_is_translation_invariant(
            a in arb_box(), b in arb_box(), tx in -50.0..50.0f64, ty in -50.0..50.0f64
        ) {
            let d0 = encode_track(&a, &b).unwrap();
            let d1 = encode_track(&a.translated(tx, ty), &b.translated(tx, ty)).unwrap();
            for (u, v) in d0.to_array().iter().zip(d1.to_array()) {
                prop_assert!((u - v).abs() <= 1e-9 * (1.0 + u.abs()));
            }
        }
    }
}
