mod common;

use common::{all_point_ap, brute_force_matching, det, scripted_eval};
use fsayolo::data::{generate, load_dataset, render_scene, SceneSpec};
use fsayolo::metrics::{average_precision, evaluate, evaluate_detections, match_predictions, pixel_ground_truth};
use fsayolo::model::Model;
use fsayolo::postprocess::{BBox, DetBox};
use fsayolo::ModelConfig;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn flags_and_gt() -> impl Strategy<Value = (Vec<bool>, usize)> {
    prop::collection::vec(any::<bool>(), 0..=20).prop_flat_map(|flags| {
        let tp = flags.iter().filter(|&&f| f).count();
        (Just(flags), tp.max(1)..=tp + 5)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn ap_101_point_tracks_all_point_area((flags, num_gt) in flags_and_gt()) {
        let ap = average_precision(&flags, num_gt);
        prop_assert!((0.0..=1.0).contains(&ap));
        prop_assert!((ap - all_point_ap(&flags, num_gt)).abs() <= 0.01, "ap {} oracle {}", ap, all_point_ap(&flags, num_gt));
    }

    #[test]
    fn trailing_false_positive_never_raises_ap((flags, num_gt) in flags_and_gt()) {
        let mut longer = flags.clone();
        longer.push(false);
        prop_assert!(average_precision(&longer, num_gt) <= average_precision(&flags, num_gt) + 1e-15);
    }

    #[test]
    fn greedy_matching_matches_exhaustive_search(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rand_box = |rng: &mut ChaCha8Rng| BBox::new(rng.random_range(0.0..12.0), rng.random_range(0.0..12.0), rng.random_range(3.0..8.0), rng.random_range(3.0..8.0));
        let gts: Vec<(usize, BBox)> = (0..4).map(|_| (rng.random_range(0..2), rand_box(&mut rng))).collect();
        let mut preds: Vec<DetBox> = (0..6).map(|_| det(rand_box(&mut rng), rng.random_range(0.05..0.95), rng.random_range(0..2))).collect();
        preds.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
        let thr = rng.random_range(0.1..0.6);
        prop_assert_eq!(match_predictions(&preds, &gts, thr), brute_force_matching(&preds, &gts, thr));
    }
}

#[test]
fn worked_ap_example() {
    let flags = [true, false, true];
    assert!((all_point_ap(&flags, 2) - 0.8333333).abs() < 1e-6);
    assert!((average_precision(&flags, 2) - 0.8333333).abs() < 0.01);
}

/// Jittered, partly dropped ground truth plus spurious boxes.
fn synthetic_detections(gts: &[(usize, BBox)], rng: &mut ChaCha8Rng) -> Vec<DetBox> {
    let mut out = Vec::new();
    for (c, g) in gts {
        if rng.random_bool(0.15) {
            continue;
        }
        let j = |rng: &mut ChaCha8Rng, s: f32| rng.random_range(-0.25..0.25) * s;
        let b = BBox::new(g.cx + j(rng, g.w), g.cy + j(rng, g.h), g.w * (1.0 + j(rng, 1.0)), g.h * (1.0 + j(rng, 1.0)));
        let class = if rng.random_bool(0.1) { (c + 1) % 3 } else { *c };
        out.push(det(b, rng.random_range(0.05..1.0), class));
        if rng.random_bool(0.2) {
            out.push(det(BBox::new(b.cx + 1.5, b.cy - 1.0, b.w, b.h), rng.random_range(0.01..0.5), class));
        }
    }
    for _ in 0..rng.random_range(0..3) {
        let b = BBox::new(rng.random_range(0.0..160.0), rng.random_range(0.0..160.0), rng.random_range(4.0..40.0), rng.random_range(4.0..40.0));
        out.push(det(b, rng.random_range(0.01..0.9), rng.random_range(0..3)));
    }
    out
}

#[test]
fn ten_image_set_matches_scripted_evaluation() {
    let spec = SceneSpec { seed: 17, ..SceneSpec::default() };
    for trial in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let gts: Vec<Vec<(usize, BBox)>> = (0..10).map(|i| pixel_ground_truth(&render_scene(&spec, i).1, spec.image_size)).collect();
        let dets: Vec<Vec<DetBox>> = gts.iter().map(|g| synthetic_detections(g, &mut rng)).collect();
        let report = evaluate_detections(&dets, &gts, 3, 0.25, 0.45).unwrap();
        let (p, r, m50, m5095) = scripted_eval(&dets, &gts, 3);
        for (got, want, what) in [(report.precision, p, "precision"), (report.recall, r, "recall"), (report.map50, m50, "map50"), (report.map5095, m5095, "map50_95")] {
            assert!((got - want).abs() < 1e-12, "trial {trial} {what}: {got} vs {want}");
        }
        assert!(report.map50 > 0.3 && report.map50 < 1.0, "{}", report.map50);
    }
}

#[test]
fn perfect_detector_and_empty_detector() {
    let spec = SceneSpec::default();
    let gts: Vec<Vec<(usize, BBox)>> = (0..4).map(|i| pixel_ground_truth(&render_scene(&spec, i).1, 160)).collect();
    let perfect: Vec<Vec<DetBox>> = gts.iter().map(|g| g.iter().map(|(c, b)| det(*b, 0.9, *c)).collect()).collect();
    let r = evaluate_detections(&perfect, &gts, 3, 0.25, 0.45).unwrap();
    assert_eq!((r.precision, r.recall, r.map50, r.map5095), (1.0, 1.0, 1.0, 1.0));
    let none = vec![Vec::new(); 4];
    let r = evaluate_detections(&none, &gts, 3, 0.25, 0.45).unwrap();
    assert_eq!((r.recall, r.map50), (0.0, 0.0));
}

#[test]
fn evaluation_is_independent_of_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    generate(&SceneSpec { seed: 5, ..SceneSpec::default() }, 20, dir.path()).unwrap();
    let data = load_dataset(dir.path()).unwrap();
    let mut model = Model::new(ModelConfig::default(), 4).unwrap();
    // push objectness up so plenty of boxes survive the 0.001 threshold
    for (h, &id) in model.heads.iter().map(|h| &h.bias).enumerate() {
        let no = model.config.head_channels() / 3;
        let v = model.store.value_mut(id).data_mut();
        for a in 0..3 {
            v[a * no + 4] = 1.0 - h as f32;
        }
    }
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| evaluate(&model, &data, 0.25, 0.45).unwrap())
    };
    let single = run(1);
    assert!(single.map50.is_finite());
    let multi = run(4);
    assert_eq!(format!("{single:?}"), format!("{multi:?}"));
}

#[test]
fn empty_dataset_is_a_contract_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = load_dataset(dir.path()).unwrap();
    let model = Model::new(ModelConfig::default(), 0).unwrap();
    assert!(matches!(evaluate(&model, &data, 0.25, 0.45), Err(fsayolo::Error::Contract(_))));
}
