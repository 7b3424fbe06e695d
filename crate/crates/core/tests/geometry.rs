use proptest::prelude::*;
use rtgen::geometry::{iou, nms, BBox, ScoredBox};

const GRID: u32 = 1000;

/// Cells of a `GRID`² raster whose centres fall inside the box.
fn cells(b: &BBox) -> impl Iterator<Item = (u32, u32)> + '_ {
    (0..GRID).flat_map(move |r| (0..GRID).map(move |c| (r, c))).filter(|&(r, c)| {
        let (x, y) = ((c as f64 + 0.5) / GRID as f64, (r as f64 + 0.5) / GRID as f64);
        x >= b.x() && x < b.x2() && y >= b.y() && y < b.y2()
    })
}

fn counted_iou(a: &BBox, b: &BBox) -> f64 {
    let inside = |bx: &BBox, r: u32, c: u32| {
        let (x, y) = ((c as f64 + 0.5) / GRID as f64, (r as f64 + 0.5) / GRID as f64);
        x >= bx.x() && x < bx.x2() && y >= bx.y() && y < bx.y2()
    };
    let ca = cells(a).count();
    let inter = cells(a).filter(|&(r, c)| inside(b, r, c)).count();
    let cb = cells(b).count();
    inter as f64 / (ca + cb - inter) as f64
}

fn pixel_box() -> impl Strategy<Value = BBox> {
    (0u32..900, 0u32..900, 1u32..100, 1u32..100)
        .prop_map(|(x, y, w, h)| BBox::from_pixels(x as f64, y as f64, w as f64, h as f64, GRID, GRID).unwrap())
}

#[test]
fn documented_pair_matches_cell_count() {
    let a = BBox::new(0.0, 0.0, 0.2, 0.2).unwrap();
    let b = BBox::new(0.1, 0.0, 0.2, 0.2).unwrap();
    assert!((iou(&a, &b) - counted_iou(&a, &b)).abs() < 1e-9);
    assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn pixel_aligned_boxes_match_cell_count(a in pixel_box(), b in pixel_box()) {
        let counted = if iou(&a, &b) == 0.0 { 0.0 } else { counted_iou(&a, &b) };
        prop_assert!((iou(&a, &b) - counted).abs() < 1e-9);
    }

    #[test]
    fn nms_survivors_are_separated(
        raw in prop::collection::vec((pixel_box(), 0.0f64..1.0), 0..25),
        t in 0.05f64..0.9,
    ) {
        let boxes: Vec<ScoredBox> = raw.into_iter().map(|(b, s)| ScoredBox::new(b, s).unwrap()).collect();
        let kept = nms(&boxes, t).unwrap();
        for (i, a) in kept.iter().enumerate() {
            prop_assert!(boxes.contains(a));
            for b in &kept[i + 1..] {
                prop_assert!(iou(&a.bbox, &b.bbox) <= t);
                prop_assert!(a.score >= b.score);
            }
        }
    }
}
