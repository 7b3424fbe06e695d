//! Axis-aligned box arithmetic in normalized image coordinates.
//!
//! Every box is `⟨x, y, w, h⟩` with the top-left corner at `(x, y)` and all
//! values expressed as fractions of the image width/height, so a box always
//! lives inside the unit square.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default number of Fourier frequencies per coordinate (embedding length 64).
pub const DEFAULT_FREQUENCIES: usize = 8;

/// Default crop enlargement used when captioning proposals.
pub const DEFAULT_ENLARGE: f64 = 1.2;

/// IoU threshold used to deduplicate proposals.
pub const PROPOSAL_NMS_IOU: f64 = 0.1;

/// Proposals at or below this confidence are discarded.
pub const PROPOSAL_MIN_CONFIDENCE: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

impl BBox {
    /// Builds a box, clamping it to the unit square.
    ///
    /// Fails if any value is non-finite or if the clamped box has no area.
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if ![x, y, w, h].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidBox(format!(
                "non-finite coordinates ⟨{x}, {y}, {w}, {h}⟩"
            )));
        }
        if x >= 0.0 && y >= 0.0 && w > 0.0 && h > 0.0 && x + w <= 1.0 && y + h <= 1.0 {
            return Ok(Self { x, y, w, h });
        }
        Self::from_corners(x, y, x + w, y + h)
    }

    /// Builds a box from its corners, clamping to the unit square.
    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let cx1 = x1.clamp(0.0, 1.0);
        let cy1 = y1.clamp(0.0, 1.0);
        let cx2 = x2.clamp(0.0, 1.0);
        let cy2 = y2.clamp(0.0, 1.0);
        let (w, h) = (cx2 - cx1, cy2 - cy1);
        if !(w > 0.0 && h > 0.0) {
            return Err(Error::InvalidBox(format!(
                "degenerate box with corners ({x1}, {y1})-({x2}, {y2})"
            )));
        }
        Ok(Self {
            x: cx1,
            y: cy1,
            w,
            h,
        })
    }

    /// Normalizes a pixel-space box by the image dimensions.
    pub fn from_pixels(x: f64, y: f64, w: f64, h: f64, width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidBox("image has zero extent".into()));
        }
        let (fw, fh) = (f64::from(width), f64::from(height));
        Self::new(x / fw, y / fh, w / fw, h / fh)
    }

    /// The whole image, `⟨0, 0, 1, 1⟩`.
    pub const fn full() -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            w: 1.0,
            h: 1.0,
        }
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    pub fn w(&self) -> f64 {
        self.w
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn x2(&self) -> f64 {
        self.x + self.w
    }

    pub fn y2(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    /// Pixel coordinates `⟨x, y, w, h⟩` for an image of the given size.
    pub fn to_pixels(&self, width: u32, height: u32) -> [f64; 4] {
        let (fw, fh) = (f64::from(width), f64::from(height));
        [self.x * fw, self.y * fh, self.w * fw, self.h * fh]
    }

    /// Integer pixel span `[x0, x1) × [y0, y1)` covered by the box.
    ///
    /// A pixel belongs to the box when its center lies inside it.
    pub fn pixel_span(&self, width: u32, height: u32) -> (u32, u32, u32, u32) {
        let fw = f64::from(width);
        let fh = f64::from(height);
        let to_px = |v: f64, n: f64| ((v * n - 0.5).ceil().max(0.0) as u32).min(n as u32);
        (
            to_px(self.x, fw),
            to_px(self.y, fh),
            to_px(self.x2(), fw),
            to_px(self.y2(), fh),
        )
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let iw = self.x2().min(other.x2()) - self.x.max(other.x);
        let ih = self.y2().min(other.y2()) - self.y.max(other.y);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }

    pub fn contains_point(&self, px: f64, py: f64) -> bool {
        px >= self.x && px < self.x2() && py >= self.y && py < self.y2()
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

/// A proposal box with its detector confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub score: f64,
}

impl ScoredBox {
    pub fn new(bbox: BBox, score: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::InvalidArgument(format!(
                "proposal score {score} outside [0, 1]"
            )));
        }
        Ok(Self { bbox, score })
    }
}

/// Intersection over union of two boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Greedy non-maximum suppression.
///
/// Boxes are visited in descending score order (ties keep input order); a box
/// survives when its IoU with every previously kept box is at most
/// `iou_threshold`.
pub fn nms(boxes: &[ScoredBox], iou_threshold: f64) -> Result<Vec<ScoredBox>> {
    if !(0.0..=1.0).contains(&iou_threshold) {
        return Err(Error::InvalidArgument(format!(
            "NMS threshold {iou_threshold} outside [0, 1]"
        )));
    }
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| boxes[j].score.total_cmp(&boxes[i].score));

    let mut kept: Vec<ScoredBox> = Vec::new();
    for i in order {
        let candidate = boxes[i];
        if kept
            .iter()
            .all(|k| iou(&k.bbox, &candidate.bbox) <= iou_threshold)
        {
            kept.push(candidate);
        }
    }
    Ok(kept)
}

/// Scales a box about its center, then clamps to the unit square.
pub fn enlarge(b: &BBox, factor: f64) -> Result<BBox> {
    if !(factor >= 1.0) || !factor.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "enlargement factor must be ≥ 1, got {factor}"
        )));
    }
    let grow = factor - 1.0;
    BBox::new(
        b.x - 0.5 * b.w * grow,
        b.y - 0.5 * b.h * grow,
        b.w * factor,
        b.h * factor,
    )
}

/// Sinusoidal encoding of the four box coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierEmbedding {
    values: Vec<f64>,
    frequencies: usize,
}

impl FourierEmbedding {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn frequencies(&self) -> usize {
        self.frequencies
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }
}

/// Length of a Fourier embedding with `frequencies` bands.
pub const fn fourier_len(frequencies: usize) -> usize {
    8 * frequencies
}

/// Encodes `⟨x, y, w, h⟩` as `sin(2^j π c), cos(2^j π c)` for each coordinate
/// `c` and band `j < frequencies`, coordinate-major, sin before cos.
pub fn fourier_embed(b: &BBox, frequencies: usize) -> Result<FourierEmbedding> {
    if frequencies == 0 {
        return Err(Error::InvalidArgument(
            "Fourier embedding needs at least one frequency".into(),
        ));
    }
    let mut values = Vec::with_capacity(fourier_len(frequencies));
    for c in b.to_array() {
        let mut scale = PI;
        for _ in 0..frequencies {
            let (s, co) = (scale * c).sin_cos();
            values.push(s);
            values.push(co);
            scale *= 2.0;
        }
    }
    Ok(FourierEmbedding {
        values,
        frequencies,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bb(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    /// Rasterizes both boxes on an n×n grid of cell centers and counts cells.
    fn raster_iou(a: &BBox, b: &BBox, n: usize) -> f64 {
        let (mut inter, mut union) = (0usize, 0usize);
        for i in 0..n {
            let py = (i as f64 + 0.5) / n as f64;
            for j in 0..n {
                let px = (j as f64 + 0.5) / n as f64;
                let (ia, ib) = (a.contains_point(px, py), b.contains_point(px, py));
                inter += usize::from(ia && ib);
                union += usize::from(ia || ib);
            }
        }
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let a = bb(0.1, 0.1, 0.2, 0.2);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&bb(0.0, 0.0, 0.1, 0.1), &bb(0.5, 0.5, 0.1, 0.1)), 0.0);
    }

    #[test]
    fn iou_matches_pixel_count() {
        let a = bb(0.0, 0.0, 0.2, 0.2);
        let b = bb(0.1, 0.0, 0.2, 0.2);
        let oracle = raster_iou(&a, &b, 1000);
        assert!((oracle - 1.0 / 3.0).abs() < 1e-3);
        assert!((iou(&a, &b) - oracle).abs() < 2e-3);
    }

    #[test]
    fn degenerate_boxes_rejected() {
        assert!(BBox::new(0.2, 0.2, 0.0, 0.1).is_err());
        assert!(BBox::new(0.2, 0.2, 0.1, -0.1).is_err());
        assert!(BBox::new(1.2, 0.2, 0.1, 0.1).is_err());
        assert!(BBox::new(f64::NAN, 0.2, 0.1, 0.1).is_err());
        // partially outside is clamped, not rejected
        let b = BBox::new(0.9, 0.9, 0.3, 0.3).unwrap();
        assert!((b.w() - 0.1).abs() < 1e-12 && (b.x2() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pixel_round_trip() {
        let b = BBox::from_pixels(32.0, 16.0, 64.0, 48.0, 640, 480).unwrap();
        for (g, w) in b.to_pixels(640, 480).iter().zip([32.0, 16.0, 64.0, 48.0]) {
            assert!((g - w).abs() < 1e-9);
        }
    }

    #[test]
    fn nms_basic_cases() {
        let one = vec![ScoredBox::new(bb(0.1, 0.1, 0.2, 0.2), 0.5).unwrap()];
        assert_eq!(nms(&one, 0.1).unwrap(), one);
        assert!(nms(&[], 0.1).unwrap().is_empty());

        let b = bb(0.1, 0.1, 0.3, 0.3);
        let pair = vec![
            ScoredBox::new(b, 0.8).unwrap(),
            ScoredBox::new(b, 0.9).unwrap(),
        ];
        let kept = nms(&pair, 0.1).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
        assert!(nms(&pair, 1.5).is_err());
    }

    #[test]
    fn nms_ties_follow_input_order() {
        let a = ScoredBox::new(bb(0.1, 0.1, 0.3, 0.3), 0.5).unwrap();
        let b = ScoredBox::new(bb(0.12, 0.1, 0.3, 0.3), 0.5).unwrap();
        assert_eq!(nms(&[a, b], 0.1).unwrap(), vec![a]);
        assert_eq!(nms(&[b, a], 0.1).unwrap(), vec![b]);
    }

    /// Reference: mark suppression pairwise over the score-sorted list.
    fn reference_nms(boxes: &[ScoredBox], thr: f64) -> Vec<ScoredBox> {
        let mut idx: Vec<usize> = (0..boxes.len()).collect();
        idx.sort_by(|&i, &j| boxes[j].score.partial_cmp(&boxes[i].score).unwrap());
        let mut suppressed = vec![false; idx.len()];
        for a in 0..idx.len() {
            if suppressed[a] {
                continue;
            }
            for b in a + 1..idx.len() {
                if iou(&boxes[idx[a]].bbox, &boxes[idx[b]].bbox) > thr {
                    suppressed[b] = true;
                }
            }
        }
        idx.iter()
            .zip(&suppressed)
            .filter(|(_, s)| !**s)
            .map(|(&i, _)| boxes[i])
            .collect()
    }

    fn random_scored(rng: &mut ChaCha8Rng) -> ScoredBox {
        let w = rng.random_range(0.05..0.4);
        let h = rng.random_range(0.05..0.4);
        let x = rng.random_range(0.0..1.0 - w);
        let y = rng.random_range(0.0..1.0 - h);
        ScoredBox::new(bb(x, y, w, h), rng.random_range(0.0..1.0)).unwrap()
    }

    #[test]
    fn nms_matches_reference_on_random_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let boxes: Vec<_> = (0..50).map(|_| random_scored(&mut rng)).collect();
            assert_eq!(nms(&boxes, 0.1).unwrap(), reference_nms(&boxes, 0.1));
        }
    }

    #[test]
    fn enlarge_cases() {
        let b = bb(0.4, 0.4, 0.2, 0.2);
        assert_eq!(enlarge(&b, 1.0).unwrap(), b);
        let e = enlarge(&b, 1.5).unwrap();
        for (got, want) in e.to_array().iter().zip([0.35, 0.35, 0.3, 0.3]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!(enlarge(&b, 0.9).is_err());
    }

    #[test]
    fn enlarge_clamps_at_corner() {
        let b = bb(0.0, 0.0, 0.2, 0.2);
        // scale about (0.1, 0.1) to ⟨-0.1,-0.1,0.4,0.4⟩, then intersect with [0,1]²
        let scaled = [-0.1f64, -0.1, 0.3, 0.3];
        let want = [
            scaled[0].max(0.0),
            scaled[1].max(0.0),
            scaled[2].min(1.0) - scaled[0].max(0.0),
            scaled[3].min(1.0) - scaled[1].max(0.0),
        ];
        let got = enlarge(&b, 2.0).unwrap().to_array();
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-12, "{got:?} vs {want:?}");
        }
    }

    #[test]
    fn fourier_zero_coordinates() {
        let e = fourier_embed(&BBox::full(), 3).unwrap();
        assert_eq!(e.len(), 24);
        // x and y are 0: sin terms 0, cos terms 1
        for pair in e.values()[..12].chunks(2) {
            assert_eq!(pair[0], 0.0);
            assert_eq!(pair[1], 1.0);
        }
        assert_eq!(fourier_embed(&BBox::full(), 1).unwrap().len(), 8);
        assert!(fourier_embed(&BBox::full(), 0).is_err());
    }

    #[test]
    fn fourier_direct_evaluation() {
        let b = bb(0.25, 0.5, 0.5, 0.25);
        let e = fourier_embed(&b, 2).unwrap();
        let mut want = Vec::new();
        for c in [0.25f64, 0.5, 0.5, 0.25] {
            want.push((PI * c).sin());
            want.push((PI * c).cos());
            want.push((2.0 * PI * c).sin());
            want.push((2.0 * PI * c).cos());
        }
        assert_eq!(e.len(), 16);
        for (g, w) in e.values().iter().zip(&want) {
            assert!((g - w).abs() < 1e-15);
        }
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..0.9f64, 0.0..0.9f64, 0.01..1.0f64, 0.01..1.0f64)
            .prop_filter_map("valid", |(x, y, w, h)| BBox::new(x, y, w, h).ok())
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            if ab == 1.0 {
                prop_assert!((a.x() - b.x()).abs() < 1e-9 && (a.w() - b.w()).abs() < 1e-9);
            }
        }

        #[test]
        fn enlarge_is_monotone(b in arb_box(), f in 1.0..3.0f64, extra in 0.0..2.0f64) {
            let small = enlarge(&b, f).unwrap();
            let large = enlarge(&b, f + extra).unwrap();
            prop_assert!(large.x() <= small.x() + 1e-12);
            prop_assert!(large.y() <= small.y() + 1e-12);
            prop_assert!(large.x2() >= small.x2() - 1e-12);
            prop_assert!(large.y2() >= small.y2() - 1e-12);
        }

        #[test]
        fn fourier_entries_bounded(b in arb_box(), f in 1usize..10) {
            let e = fourier_embed(&b, f).unwrap();
            prop_assert_eq!(e.len(), 8 * f);
            prop_assert!(e.values().iter().all(|v| (-1.0..=1.0).contains(v)));
        }

        #[test]
        fn nms_output_pairwise_below_threshold(seed in 0u64..1000, thr in 0.0..1.0f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let boxes: Vec<_> = (0..20).map(|_| random_scored(&mut rng)).collect();
            let kept = nms(&boxes, thr).unwrap();
            for (i, a) in kept.iter().enumerate() {
                for b in &kept[i + 1..] {
                    prop_assert!(iou(&a.bbox, &b.bbox) <= thr);
                    prop_assert!(a.score >= b.score);
                }
            }
        }
    }
}
