mod support;

use dentcascade_core::metrics::{ap_summary, average_precision, match_detections, GroundTruth, ImageEval};
use dentcascade_core::{BBox, Detection};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::oracles::{brute_force_summary, random_instance, raster_iou};

#[test]
fn ap_summary_matches_brute_force_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2023);
    for case in 0..250 {
        let images = random_instance(&mut rng);
        let got = ap_summary(&images).unwrap();
        let (ap, ap50, ap75) = brute_force_summary(&images);
        assert!((got.ap - ap).abs() < 1e-9, "case {case}: AP {} vs {}", got.ap, ap);
        assert!(
            (got.ap50 - ap50).abs() < 1e-9,
            "case {case}: AP50 {} vs {}",
            got.ap50,
            ap50
        );
        assert!(
            (got.ap75 - ap75).abs() < 1e-9,
            "case {case}: AP75 {} vs {}",
            got.ap75,
            ap75
        );
    }
}

#[test]
fn iou_matches_pixel_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..1000 {
        let mut corners = || {
            let x0 = rng.random_range(0..40i64);
            let y0 = rng.random_range(0..40i64);
            [x0, y0, x0 + rng.random_range(1..25), y0 + rng.random_range(1..25)]
        };
        let (a, b) = (corners(), corners());
        let to_box = |c: [i64; 4]| BBox::new(c[0] as f64, c[1] as f64, c[2] as f64, c[3] as f64).unwrap();
        let analytic = dentcascade_core::iou(&to_box(a), &to_box(b)).unwrap();
        assert!((analytic - raster_iou(a, b)).abs() < 1e-9, "{a:?} {b:?}");
    }
}

#[test]
fn ap_is_monotone_in_threshold_and_bounded_by_ap50() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let images = random_instance(&mut rng);
        let mut prev = f64::INFINITY;
        for t in [0.1, 0.3, 0.5, 0.6, 0.75, 0.9, 0.95] {
            let ap = average_precision(&images, t).unwrap().mean;
            assert!(ap <= prev + 1e-12);
            prev = ap;
        }
        let s = ap_summary(&images).unwrap();
        assert!(s.ap <= s.ap50 + 1e-12);
    }
}

#[test]
fn duplicated_predictions_never_raise_ap() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..100 {
        let images = random_instance(&mut rng);
        let doubled: Vec<ImageEval> = images
            .iter()
            .map(|im| ImageEval {
                predictions: im.predictions.iter().chain(&im.predictions).cloned().collect(),
                ground_truths: im.ground_truths.clone(),
            })
            .collect();
        for t in [0.5, 0.75] {
            let a = average_precision(&images, t).unwrap().mean;
            let b = average_precision(&doubled, t).unwrap().mean;
            assert!(b <= a + 1e-12, "{b} > {a}");
        }
    }
}

#[test]
fn metrics_are_bit_reproducible() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let images = random_instance(&mut rng);
    let a = ap_summary(&images).unwrap();
    let b = ap_summary(&images).unwrap();
    assert_eq!(a.ap.to_bits(), b.ap.to_bits());
    assert_eq!(a, b);
}

#[test]
fn single_prediction_at_iou_0_6() {
    let gt = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
    // Shifting by 2.5 px gives intersection 75 and union 125.
    let pred = BBox::new(2.5, 0.0, 12.5, 10.0).unwrap();
    assert!((gt.iou(&pred) - 0.6).abs() < 1e-12);
    let images = vec![ImageEval {
        predictions: vec![Detection::new(pred, 3, 0.9).unwrap()],
        ground_truths: vec![GroundTruth { bbox: gt, class_id: 3 }],
    }];
    let s = ap_summary(&images).unwrap();
    assert_eq!(s.ap50, 1.0);
    assert_eq!(s.ap75, 0.0);
}

fn arb_box() -> impl Strategy<Value = BBox> {
    (0.0..50.0f64, 0.0..50.0f64, 1.0..20.0f64, 1.0..20.0f64)
        .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
}

proptest! {
    #[test]
    fn greedy_matching_is_one_to_one(
        preds in prop::collection::vec((arb_box(), 0..3usize, 0.0..1.0f64), 0..12),
        gts in prop::collection::vec((arb_box(), 0..3usize), 0..12),
        thr in 0.05..0.95f64,
    ) {
        let preds: Vec<Detection> = preds.into_iter().map(|(b, c, s)| Detection::new(b, c, s).unwrap()).collect();
        let gts: Vec<GroundTruth> = gts.into_iter().map(|(bbox, class_id)| GroundTruth { bbox, class_id }).collect();
        let m = match_detections(&preds, &gts, thr);
        let mut p_seen = vec![false; preds.len()];
        let mut g_seen = vec![false; gts.len()];
        for &(p, g, iou) in &m.pairs {
            prop_assert!(!p_seen[p] && !g_seen[g]);
            p_seen[p] = true;
            g_seen[g] = true;
            prop_assert!(iou >= thr);
            prop_assert_eq!(preds[p].class_id, gts[g].class_id);
        }
        for &p in &m.unmatched_predictions { prop_assert!(!p_seen[p]); p_seen[p] = true; }
        for &g in &m.unmatched_ground_truths { prop_assert!(!g_seen[g]); g_seen[g] = true; }
        prop_assert!(p_seen.iter().all(|&s| s) && g_seen.iter().all(|&s| s));
    }
}
