//! The baseline detector with its default policy learns the synthetic task
//! well enough that robustness comparisons are meaningful.

use diffyolo_core::data::{generate_synthetic, SyntheticConfig, CLASS_NAMES};
use diffyolo_core::detector::{train_detector, DecodeConfig, DetectorConfig, DetectorMode, TrainPolicy, Trainable};
use diffyolo_core::eval::{evaluate_detections, EvalConfig};

#[test]
fn baseline_generalises_to_held_out_images() {
    let all = generate_synthetic(&SyntheticConfig { count: 250, ..Default::default() }, 11).unwrap();
    let (train, test) = all.split_at(200);
    let policy = TrainPolicy { trainable: Trainable::All, ..Default::default() };
    let (ck, h) = train_detector(train, DetectorMode::Baseline, &DetectorConfig::default(), None, None, &policy, 0).unwrap();
    assert!(h.epoch_loss.last().unwrap() < h.epoch_loss.first().unwrap());
    let preds = ck.predict(test, None, &DecodeConfig::default()).unwrap();
    let truth: Vec<_> = test.iter().map(|d| d.boxes.clone()).collect();
    let r = evaluate_detections("none", "baseline", &CLASS_NAMES, &preds, &truth, &EvalConfig::default()).unwrap();
    assert!(r.all.map50 >= 0.7, "held-out mAP@0.5 {:.3}", r.all.map50);
}
