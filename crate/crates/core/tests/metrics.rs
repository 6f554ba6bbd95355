mod common;

use common::{brute_force_ap, brute_force_ap_range, exhaustive_assignment, fixture_dir, metric_fixtures};
use diffyolo_core::data::BBox;
use diffyolo_core::eval::{
    average_precision, class_metrics, coco_thresholds, iou, match_and_pr, render_report, ApMethod, EvalReport, ScoredBox,
    TruthBox,
};
use proptest::prelude::*;

fn load_reports(name: &str) -> Vec<EvalReport> {
    let text = std::fs::read_to_string(fixture_dir("report").join(name)).unwrap();
    let value: serde_json::Value = serde_json::from_str(&text).unwrap();
    match value {
        serde_json::Value::Array(_) => serde_json::from_value(value).unwrap(),
        _ => vec![serde_json::from_value(value).unwrap()],
    }
}

#[test]
fn fixtures_agree_with_brute_force() {
    let fixtures = metric_fixtures();
    assert!(fixtures.len() >= 5);
    for (name, f) in fixtures {
        assert!(f.detections.len() + f.truth.len() <= 10, "{name} is too large for the oracle");
        for thr in coco_thresholds() {
            let ap = average_precision(&match_and_pr(&f.detections, &f.truth, thr).pr, ApMethod::Interp101);
            let oracle = brute_force_ap(&f.detections, &f.truth, thr);
            assert!((ap - oracle).abs() <= 1e-9, "{name} @ {thr}: {ap} vs {oracle}");
        }
        let m = class_metrics(&f.detections, &f.truth, 0.25, ApMethod::Interp101);
        assert!((m.ap50_95 - brute_force_ap_range(&f.detections, &f.truth)).abs() <= 1e-9, "{name}");
        if let Some(tp) = &f.expected_tp {
            let greedy = match_and_pr(&f.detections, &f.truth, 0.5).tp;
            assert_eq!(&greedy, tp, "{name}");
            assert_eq!(exhaustive_assignment(&f.detections, &f.truth, 0.5), greedy, "{name}");
        }
        if let Some(want) = f.expected_ap50 {
            assert!((m.ap50 - want).abs() <= 1e-9, "{name}: {} vs {want}", m.ap50);
        }
    }
}

#[test]
fn iou_one_seventh() {
    let v = iou(&BBox::new(0.0, 0.0, 2.0, 2.0), &BBox::new(1.0, 1.0, 3.0, 3.0));
    assert!((v - 1.0 / 7.0).abs() < 1e-12);
}

fn scene() -> impl Strategy<Value = (Vec<ScoredBox>, Vec<TruthBox>)> {
    let bx = (0.0f64..40.0, 0.0f64..40.0, 2.0f64..15.0, 2.0f64..15.0)
        .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h));
    let truth = prop::collection::vec((0usize..2, bx.clone()), 0..5)
        .prop_map(|v| v.into_iter().map(|(image, bbox)| TruthBox { image, bbox }).collect::<Vec<_>>());
    truth.prop_flat_map(move |truth| {
        let t = truth.clone();
        // detections are jittered copies of ground truth plus free boxes
        let jittered = prop::collection::vec((0usize..5, -3.0f64..3.0, -3.0f64..3.0, 0.0f64..1.0), 0..4);
        let free = prop::collection::vec((0usize..2, bx.clone(), 0.0f64..1.0), 0..3);
        (jittered, free).prop_map(move |(jit, free)| {
            let mut dets = Vec::new();
            for (i, dx, dy, c) in jit {
                if let Some(g) = t.get(i % t.len().max(1)) {
                    let b = g.bbox;
                    dets.push(ScoredBox { image: g.image, bbox: BBox::new(b.x1 + dx, b.y1 + dy, b.x2 + dx, b.y2 + dy), confidence: c });
                }
            }
            for (image, bbox, c) in free {
                dets.push(ScoredBox { image, bbox, confidence: c });
            }
            (dets, t.clone())
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn random_scenes_match_brute_force((dets, truth) in scene()) {
        for thr in [0.5, 0.75, 0.95] {
            let ap = average_precision(&match_and_pr(&dets, &truth, thr).pr, ApMethod::Interp101);
            prop_assert!((ap - brute_force_ap(&dets, &truth, thr)).abs() <= 1e-9);
        }
    }

    #[test]
    fn stricter_iou_never_raises_ap((dets, truth) in scene()) {
        let ap = |t| average_precision(&match_and_pr(&dets, &truth, t).pr, ApMethod::Interp101);
        let (a50, a75, a95) = (ap(0.5), ap(0.75), ap(0.95));
        prop_assert!(a50 >= a75 && a75 >= a95, "{} {} {}", a50, a75, a95);
    }

    #[test]
    fn low_confidence_false_positive_keeps_envelope((dets, truth) in scene()) {
        let before = match_and_pr(&dets, &truth, 0.5);
        let mut more = dets.clone();
        more.push(ScoredBox { image: 7, bbox: BBox::new(0.0, 0.0, 1.0, 1.0), confidence: -1.0 });
        let after = match_and_pr(&more, &truth, 0.5);
        let ap_before = average_precision(&before.pr, ApMethod::Interp101);
        let ap_after = average_precision(&after.pr, ApMethod::Interp101);
        prop_assert!(ap_after <= ap_before + 1e-12);
    }
}

#[test]
fn golden_csv() {
    let out = render_report(&load_reports("pair_baseline.json"), &load_reports("pair_diffyolo.json")).unwrap();
    let want = std::fs::read_to_string(fixture_dir("report").join("pair_expected.csv")).unwrap();
    assert_eq!(out.csv, want);
}

#[test]
fn published_gaussian_results_mark_diffyolo_better() {
    let out = render_report(&load_reports("reference_yolov5_gaussian.json"), &load_reports("reference_diffyolo_gaussian.json")).unwrap();
    assert!(out.csv.contains("gaussian,all,mAP@0.5,0.7510,0.7750,+0.0240,better"), "{}", out.csv);
    assert!(out.csv.contains("gaussian,spur,mAP@0.5,0.8840,0.8450,-0.0390,worse"));
    assert!(out.text.contains("0.751   0.775 [+]"), "{}", out.text);
}

