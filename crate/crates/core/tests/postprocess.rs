mod common;

use common::{brute_force_nms, decode_round_trip, det, iou_oracle, random_box_set};
use fsayolo::postprocess::{iou, nms, BBox, DetBox};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn key(b: &DetBox) -> (u32, u32, u32, u32, u32, usize) {
    (b.bbox.cx.to_bits(), b.bbox.cy.to_bits(), b.bbox.w.to_bits(), b.bbox.h.to_bits(), b.confidence.to_bits(), b.class_id)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn greedy_nms_matches_brute_force(seed in any::<u64>(), thr in 0.1f32..0.9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let boxes = random_box_set(&mut rng);
        let got = nms(&boxes, thr);
        let want: Vec<DetBox> = brute_force_nms(&boxes, thr as f64).into_iter().map(|i| boxes[i].clone()).collect();
        prop_assert_eq!(&got, &want);

        prop_assert_eq!(&nms(&got, thr), &got);

        let mut shuffled = boxes.clone();
        shuffled.shuffle(&mut rng);
        let mut a: Vec<_> = nms(&shuffled, thr).iter().map(key).collect();
        let mut b: Vec<_> = got.iter().map(key).collect();
        a.sort_unstable();
        b.sort_unstable();
        prop_assert_eq!(a, b);

        for (i, x) in got.iter().enumerate() {
            prop_assert!(boxes.contains(x));
            for y in &got[i + 1..] {
                prop_assert!(x.class_id != y.class_id || iou(&x.bbox, &y.bbox) < thr as f64);
                prop_assert!(x.confidence >= y.confidence);
            }
        }
    }

    #[test]
    fn iou_agrees_with_corner_oracle(
        a in (0.0f32..30.0, 0.0f32..30.0, 0.5f32..15.0, 0.5f32..15.0),
        b in (0.0f32..30.0, 0.0f32..30.0, 0.5f32..15.0, 0.5f32..15.0),
    ) {
        let (a, b) = (BBox::new(a.0, a.1, a.2, a.3), BBox::new(b.0, b.1, b.2, b.3));
        let v = iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert!((v - iou_oracle(&a, &b)).abs() < 1e-9);
        prop_assert!((v - iou(&b, &a)).abs() < 1e-12);
    }
}

/// Counts unit squares of a 0.01 grid inside both boxes.
fn raster_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let step = 0.01;
    let (mut inter, mut union) = (0u64, 0u64);
    for i in 0..300 {
        for j in 0..300 {
            let (x, y) = ((i as f64 + 0.5) * step, (j as f64 + 0.5) * step);
            let ina = x >= a[0] && x < a[2] && y >= a[1] && y < a[3];
            let inb = x >= b[0] && x < b[2] && y >= b[1] && y < b[3];
            inter += (ina && inb) as u64;
            union += (ina || inb) as u64;
        }
    }
    inter as f64 / union as f64
}

#[test]
fn corner_example_matches_rasterized_count() {
    let a = BBox::from_corners(0.0, 0.0, 2.0, 2.0);
    let b = BBox::from_corners(1.0, 1.0, 3.0, 3.0);
    let raster = raster_iou([0.0, 0.0, 2.0, 2.0], [1.0, 1.0, 3.0, 3.0]);
    assert!((raster - 1.0 / 7.0).abs() < 1e-9);
    assert!((iou(&a, &b) - raster).abs() < 1e-6);
}

#[test]
fn suppression_boundary_against_pairwise_oracle() {
    // b is the top half of a: IoU = 4/8
    let a = BBox::from_corners(0.0, 0.0, 4.0, 2.0);
    let b = BBox::from_corners(0.0, 0.0, 4.0, 1.0);
    assert_eq!(iou(&a, &b), 0.5);
    let boxes = vec![det(a, 0.9, 0), det(b, 0.8, 0)];
    let kept = nms(&boxes, 0.5);
    assert_eq!(kept.len(), 1);
    assert_eq!(brute_force_nms(&boxes, 0.5), vec![0]);
    let boxes = vec![det(a, 0.9, 0), det(b, 0.8, 1)];
    assert_eq!(nms(&boxes, 0.5).len(), 2);
}

#[test]
fn decode_inverts_encode_on_generated_boxes() {
    let (valid, recovered) = decode_round_trip(21, 60);
    assert!(valid > 300, "{valid}");
    assert!(recovered as f64 >= 0.99 * valid as f64, "{recovered}/{valid}");
}
