//! Axis-aligned box arithmetic shared by every other module.
//!
//! Boxes use corner form `(x_min, y_min, x_max, y_max)` in continuous pixel
//! units. Area is `(x_max - x_min) * (y_max - y_min)` with no `+1` pixel
//! correction, and zero-area boxes are legal.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Width and height of a canvas in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Size {
    pub width: f64,
    pub height: f64,
}

impl Size {
    pub fn new(width: f64, height: f64) -> Result<Self> {
        if !(width.is_finite() && height.is_finite() && width > 0.0 && height > 0.0) {
            return Err(Error::invalid(format!(
                "canvas must have positive finite size, got {width}x{height}"
            )));
        }
        Ok(Size { width, height })
    }

    pub fn bbox(&self) -> BBox {
        BBox {
            x_min: 0.0,
            y_min: 0.0,
            x_max: self.width,
            y_max: self.height,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::invalid(format!(
                "invalid box [{x_min}, {y_min}, {x_max}, {y_max}]"
            )))
        }
    }

    /// Builds a box from two arbitrary corners, ordering each axis.
    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BBox {
            x_min: x0.min(x1),
            y_min: y0.min(y1),
            x_max: x0.max(x1),
            y_max: y0.max(y1),
        }
    }

    pub fn is_valid(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
            && self.x_min <= self.x_max
            && self.y_min <= self.y_max
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

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn corners(&self) -> [(f64, f64); 4] {
        [
            (self.x_min, self.y_min),
            (self.x_max, self.y_min),
            (self.x_min, self.y_max),
            (self.x_max, self.y_max),
        ]
    }

    /// Overlap with `other`, or `None` when the boxes do not overlap with
    /// positive area.
    pub fn intersection(&self, other: &BBox) -> Option<BBox> {
        let x_min = self.x_min.max(other.x_min);
        let y_min = self.y_min.max(other.y_min);
        let x_max = self.x_max.min(other.x_max);
        let y_max = self.y_max.min(other.y_max);
        (x_max > x_min && y_max > y_min).then_some(BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: u32,
    pub score: f64,
}

impl Detection {
    pub fn new(bbox: BBox, class_id: u32, score: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::invalid(format!("score {score} outside [0, 1]")));
        }
        Ok(Detection {
            bbox,
            class_id,
            score,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub bbox: BBox,
    pub class_id: u32,
}

impl GroundTruthBox {
    pub fn new(bbox: BBox, class_id: u32) -> Self {
        GroundTruthBox { bbox, class_id }
    }
}

/// Intersection over union. Returns 0 when the union has zero area.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = match a.intersection(b) {
        Some(i) => i.area(),
        None => 0.0,
    };
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Indices of `dets` in descending score order, ties broken by lower index.
pub fn score_order<T>(items: &[T], score: impl Fn(&T) -> f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&i, &j| {
        score(&items[j])
            .partial_cmp(&score(&items[i]))
            .unwrap_or(Ordering::Equal)
            .then(i.cmp(&j))
    });
    order
}

/// Greedy non-maximum suppression; returns kept input indices in
/// score-descending order.
pub fn nms_indices(dets: &[Detection], iou_thresh: f64, class_aware: bool) -> Vec<usize> {
    let order = score_order(dets, |d| d.score);
    let mut suppressed = vec![false; dets.len()];
    let mut kept = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        kept.push(i);
        for &j in &order[pos + 1..] {
            if suppressed[j] || (class_aware && dets[j].class_id != dets[i].class_id) {
                continue;
            }
            if iou(&dets[i].bbox, &dets[j].bbox) >= iou_thresh {
                suppressed[j] = true;
            }
        }
    }
    kept
}

pub fn nms(dets: &[Detection], iou_thresh: f64, class_aware: bool) -> Vec<Detection> {
    nms_indices(dets, iou_thresh, class_aware)
        .into_iter()
        .map(|i| dets[i])
        .collect()
}

/// Invertible 2x3 affine map: `x' = a*x + b*y + tx`, `y' = c*x + d*y + ty`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTransform {
    a: f64,
    b: f64,
    tx: f64,
    c: f64,
    d: f64,
    ty: f64,
}

impl AffineTransform {
    pub fn new(a: f64, b: f64, tx: f64, c: f64, d: f64, ty: f64) -> Result<Self> {
        let t = AffineTransform {
            a,
            b,
            tx,
            c,
            d,
            ty,
        };
        let det = t.determinant();
        if [a, b, tx, c, d, ty].iter().any(|v| !v.is_finite()) || det == 0.0 || !det.is_finite()
        {
            return Err(Error::invalid(format!(
                "affine transform [{a} {b} {tx}; {c} {d} {ty}] is not invertible"
            )));
        }
        Ok(t)
    }

    pub const fn identity() -> Self {
        AffineTransform {
            a: 1.0,
            b: 0.0,
            tx: 0.0,
            c: 0.0,
            d: 1.0,
            ty: 0.0,
        }
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        AffineTransform {
            tx: dx,
            ty: dy,
            ..Self::identity()
        }
    }

    pub fn scale(sx: f64, sy: f64) -> Result<Self> {
        Self::new(sx, 0.0, 0.0, 0.0, sy, 0.0)
    }

    /// Mirror about the vertical line `x = width / 2`.
    pub fn hflip(width: f64) -> Self {
        AffineTransform {
            a: -1.0,
            tx: width,
            ..Self::identity()
        }
    }

    pub fn vflip(height: f64) -> Self {
        AffineTransform {
            d: -1.0,
            ty: height,
            ..Self::identity()
        }
    }

    /// Rotation by `degrees` about `(cx, cy)` using the matrix
    /// `[cos -sin; sin cos]`. Multiples of 90 degrees are exact.
    pub fn rotation_deg(degrees: f64, cx: f64, cy: f64) -> Result<Self> {
        let (sin, cos) = exact_sin_cos(degrees);
        Self::new(
            cos,
            -sin,
            cx - cos * cx + sin * cy,
            sin,
            cos,
            cy - sin * cx - cos * cy,
        )
    }

    /// Shear about `(cx, cy)`: `x' = x + tan(ax)(y - cy)`, `y' = y + tan(ay)(x - cx)`.
    pub fn shear_deg(ax_deg: f64, ay_deg: f64, cx: f64, cy: f64) -> Result<Self> {
        let kx = ax_deg.to_radians().tan();
        let ky = ay_deg.to_radians().tan();
        Self::new(1.0, kx, -kx * cy, ky, 1.0, -ky * cx)
    }

    pub fn coefficients(&self) -> [f64; 6] {
        [self.a, self.b, self.tx, self.c, self.d, self.ty]
    }

    pub fn determinant(&self) -> f64 {
        self.a * self.d - self.b * self.c
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.a * x + self.b * y + self.tx,
            self.c * x + self.d * y + self.ty,
        )
    }

    /// True when the map sends axis-aligned boxes to axis-aligned boxes.
    pub fn is_axis_preserving(&self) -> bool {
        self.b == 0.0 && self.c == 0.0
    }

    /// The map applying `self` first and then `next`.
    pub fn then(&self, next: &AffineTransform) -> AffineTransform {
        AffineTransform {
            a: next.a * self.a + next.b * self.c,
            b: next.a * self.b + next.b * self.d,
            tx: next.a * self.tx + next.b * self.ty + next.tx,
            c: next.c * self.a + next.d * self.c,
            d: next.c * self.b + next.d * self.d,
            ty: next.c * self.tx + next.d * self.ty + next.ty,
        }
    }

    pub fn inverse(&self) -> AffineTransform {
        if self.is_axis_preserving() {
            // Reciprocals of +-1 and powers of two stay exact here.
            let a = 1.0 / self.a;
            let d = 1.0 / self.d;
            return AffineTransform {
                a,
                b: 0.0,
                tx: -self.tx * a,
                c: 0.0,
                d,
                ty: -self.ty * d,
            };
        }
        let det = self.determinant();
        let a = self.d / det;
        let b = -self.b / det;
        let c = -self.c / det;
        let d = self.a / det;
        AffineTransform {
            a,
            b,
            tx: -(a * self.tx + b * self.ty),
            c,
            d,
            ty: -(c * self.tx + d * self.ty),
        }
    }
}

impl Default for AffineTransform {
    fn default() -> Self {
        Self::identity()
    }
}

fn exact_sin_cos(degrees: f64) -> (f64, f64) {
    let turns = degrees.rem_euclid(360.0);
    if turns == 0.0 {
        (0.0, 1.0)
    } else if turns == 90.0 {
        (1.0, 0.0)
    } else if turns == 180.0 {
        (0.0, -1.0)
    } else if turns == 270.0 {
        (-1.0, 0.0)
    } else {
        degrees.to_radians().sin_cos()
    }
}

/// Maps the four corners of `b` through `t` and returns their axis-aligned hull.
pub fn transform_box(t: &AffineTransform, b: &BBox) -> BBox {
    let mut out = BBox {
        x_min: f64::INFINITY,
        y_min: f64::INFINITY,
        x_max: f64::NEG_INFINITY,
        y_max: f64::NEG_INFINITY,
    };
    for (x, y) in b.corners() {
        let (u, v) = t.apply(x, y);
        out.x_min = out.x_min.min(u);
        out.y_min = out.y_min.min(v);
        out.x_max = out.x_max.max(u);
        out.y_max = out.y_max.max(v);
    }
    out
}

/// Clips `b` to the canvas `[0, w] x [0, h]`. Returns the clipped box and
/// the fraction of the original area that remains visible, or `None` when
/// nothing remains or the original box has zero area.
pub fn clip_box(b: &BBox, canvas_w: f64, canvas_h: f64) -> Option<(BBox, f64)> {
    clip_to_region(
        b,
        &BBox {
            x_min: 0.0,
            y_min: 0.0,
            x_max: canvas_w,
            y_max: canvas_h,
        },
    )
}

/// Same as [`clip_box`] for an arbitrary clipping rectangle.
pub fn clip_to_region(b: &BBox, region: &BBox) -> Option<(BBox, f64)> {
    let area = b.area();
    if area <= 0.0 {
        return None;
    }
    let clipped = b.intersection(region)?;
    let fraction = if clipped == *b {
        1.0
    } else {
        (clipped.area() / area).clamp(0.0, 1.0)
    };
    Some((clipped, fraction))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bb(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    fn det(b: BBox, class_id: u32, score: f64) -> Detection {
        Detection::new(b, class_id, score).unwrap()
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&bb(0., 0., 10., 10.), &bb(0., 0., 10., 10.)), 1.0);
        assert_eq!(iou(&bb(0., 0., 10., 10.), &bb(20., 20., 30., 30.)), 0.0);
        assert!((iou(&bb(0., 0., 2., 2.), &bb(1., 1., 3., 3.)) - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_boxes_have_zero_iou() {
        let p = bb(5., 5., 5., 5.);
        assert_eq!(iou(&p, &p), 0.0);
        assert_eq!(iou(&p, &bb(0., 0., 10., 10.)), 0.0);
        let line = bb(0., 5., 10., 5.);
        assert_eq!(iou(&line, &line), 0.0);
    }

    #[test]
    fn box_validation() {
        assert!(BBox::new(1.0, 0.0, 0.0, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::NAN, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::INFINITY, 1.0).is_err());
        assert!(Detection::new(bb(0., 0., 1., 1.), 0, 1.5).is_err());
        let parsed: std::result::Result<BBox, _> = serde_json::from_str("[3, 0, 1, 1]");
        assert!(parsed.is_err());
    }

    #[test]
    fn nms_examples() {
        let a = det(bb(0., 0., 10., 10.), 0, 0.9);
        assert_eq!(nms(&[a], 0.5, true), vec![a]);

        let dup = det(bb(0., 0., 10., 10.), 0, 0.8);
        assert_eq!(nms(&[dup, a], 0.5, true), vec![a]);

        let b = det(bb(5., 0., 15., 10.), 0, 0.8);
        assert!((iou(&a.bbox, &b.bbox) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(nms(&[a, b], 0.5, true), vec![a, b]);
        assert_eq!(nms(&[a, b], 0.3, true), vec![a]);
    }

    #[test]
    fn nms_class_awareness_and_ties() {
        let a = det(bb(0., 0., 10., 10.), 0, 0.9);
        let b = det(bb(0., 0., 10., 10.), 1, 0.8);
        assert_eq!(nms(&[a, b], 0.5, true).len(), 2);
        assert_eq!(nms(&[a, b], 0.5, false), vec![a]);

        // equal scores: lower input index wins
        let first = det(bb(0., 0., 10., 10.), 0, 0.5);
        let second = det(bb(0., 0., 10., 9.), 0, 0.5);
        assert_eq!(nms_indices(&[first, second], 0.5, true), vec![0]);
        assert_eq!(nms_indices(&[second, first], 0.5, true), vec![0]);
    }

    #[test]
    fn nms_threshold_one_removes_only_exact_duplicates() {
        let a = det(bb(0., 0., 10., 10.), 0, 0.9);
        let near = det(bb(0., 0., 10., 9.99), 0, 0.8);
        let exact = det(bb(0., 0., 10., 10.), 0, 0.7);
        assert_eq!(nms(&[a, near, exact], 1.0, true), vec![a, near]);
    }

    #[test]
    fn transform_examples() {
        let b = bb(10., 20., 40., 50.);
        assert_eq!(transform_box(&AffineTransform::identity(), &b), b);
        assert_eq!(
            transform_box(&AffineTransform::hflip(100.0), &b),
            bb(60., 20., 90., 50.)
        );
        let rot = AffineTransform::rotation_deg(90.0, 50.0, 50.0).unwrap();
        assert_eq!(
            transform_box(&rot, &bb(0., 0., 10., 10.)),
            bb(90., 0., 100., 10.)
        );
    }

    #[test]
    fn singular_transform_rejected() {
        assert!(AffineTransform::new(1.0, 2.0, 0.0, 2.0, 4.0, 0.0).is_err());
        assert!(AffineTransform::scale(0.0, 1.0).is_err());
    }

    #[test]
    fn compose_and_invert() {
        let t = AffineTransform::rotation_deg(30.0, 12.0, 7.0)
            .unwrap()
            .then(&AffineTransform::translation(3.0, -4.0));
        let round = t.then(&t.inverse());
        let (x, y) = round.apply(13.25, -2.5);
        assert!((x - 13.25).abs() < 1e-12 && (y + 2.5).abs() < 1e-12);
    }

    #[test]
    fn clip_examples() {
        let inside = bb(10., 10., 20., 20.);
        assert_eq!(clip_box(&inside, 100., 100.), Some((inside, 1.0)));
        assert_eq!(clip_box(&bb(200., 200., 210., 210.), 100., 100.), None);
        assert_eq!(
            clip_box(&bb(-5., 0., 5., 10.), 100., 100.),
            Some((bb(0., 0., 5., 10.), 0.5))
        );
        assert_eq!(clip_box(&bb(5., 5., 5., 10.), 100., 100.), None);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-50.0..150.0f64, -50.0..150.0f64, 0.0..80.0f64, 0.0..80.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
    }

    // Coordinates on a 1/1024 pixel grid, so sums with integer offsets are exact.
    fn arb_dyadic_box() -> impl Strategy<Value = BBox> {
        (-50_000i32..150_000, -50_000i32..150_000, 0i32..80_000, 0i32..80_000).prop_map(|(x, y, w, h)| {
            let s = 1.0 / 1024.0;
            let (x, y) = (f64::from(x) * s, f64::from(y) * s);
            BBox::new(x, y, x + f64::from(w) * s, y + f64::from(h) * s).unwrap()
        })
    }

    fn arb_dets() -> impl Strategy<Value = Vec<Detection>> {
        proptest::collection::vec((arb_box(), 0u32..3, 0.0..=1.0f64), 0..20).prop_map(|v| {
            v.into_iter()
                .map(|(b, c, s)| Detection::new(b, c, s).unwrap())
                .collect()
        })
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn iou_self_is_one(a in arb_box()) {
            prop_assume!(a.area() > 0.0);
            prop_assert_eq!(iou(&a, &a), 1.0);
        }

        #[test]
        fn nms_output_is_suppressed_subset(dets in arb_dets(), thr in 0.0..=1.0f64) {
            let kept = nms_indices(&dets, thr, true);
            let mut sorted = kept.clone();
            sorted.sort_unstable();
            sorted.dedup();
            prop_assert_eq!(sorted.len(), kept.len());
            for (p, &i) in kept.iter().enumerate() {
                for &j in &kept[p + 1..] {
                    prop_assert!(dets[i].score >= dets[j].score);
                    if dets[i].class_id == dets[j].class_id {
                        prop_assert!(iou(&dets[i].bbox, &dets[j].bbox) < thr);
                    }
                }
            }
        }

        #[test]
        fn axis_preserving_round_trip_is_exact(
            b in arb_dyadic_box(),
            flip_x in any::<bool>(),
            flip_y in any::<bool>(),
            dx in -64i32..64,
            dy in -64i32..64,
            sx_exp in -3i32..4,
            sy_exp in -3i32..4,
        ) {
            let mut t = AffineTransform::scale(2f64.powi(sx_exp), 2f64.powi(sy_exp)).unwrap()
                .then(&AffineTransform::translation(f64::from(dx), f64::from(dy)));
            if flip_x { t = t.then(&AffineTransform::hflip(640.0)); }
            if flip_y { t = t.then(&AffineTransform::vflip(480.0)); }
            prop_assert_eq!(transform_box(&AffineTransform::identity(), &b), b);
            prop_assert_eq!(transform_box(&t.inverse(), &transform_box(&t, &b)), b);
        }

        #[test]
        fn general_affine_point_round_trip(
            x in -100.0..100.0f64,
            y in -100.0..100.0f64,
            deg in -180.0..180.0f64,
            shx in -30.0..30.0f64,
            tx in -50.0..50.0f64,
        ) {
            let t = AffineTransform::rotation_deg(deg, 10.0, 20.0).unwrap()
                .then(&AffineTransform::shear_deg(shx, 0.0, 0.0, 0.0).unwrap())
                .then(&AffineTransform::translation(tx, 1.0));
            let point = BBox::new(x, y, x, y).unwrap();
            let back = transform_box(&t.inverse(), &transform_box(&t, &point));
            for (u, v) in back.to_array().iter().zip(point.to_array()) {
                prop_assert!((u - v).abs() < 1e-9);
            }
        }

        #[test]
        fn visible_fraction_monotone_in_canvas(b in arb_box(), w in 1.0..200.0f64, h in 1.0..200.0f64, shrink in 0.0..1.0f64) {
            let big = clip_box(&b, w, h).map_or(0.0, |(_, f)| f);
            let small = clip_box(&b, w * shrink.max(1e-3), h * shrink.max(1e-3)).map_or(0.0, |(_, f)| f);
            prop_assert!(small <= big + 1e-12);
        }
    }
}
