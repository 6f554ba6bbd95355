//! Detection metrics: IoU, greedy matching, precision/recall, interpolated AP
//! and per-class report tables.

mod report;

use serde::{Deserialize, Serialize};

use crate::data::{BBox, GroundTruthBox};
use crate::error::{invalid, Result};

pub use report::{render_report, ClassRow, EvalCounts, EvalReport, Mark, RenderedReport};

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class: usize,
    pub confidence: f64,
}

/// A single-class detection tagged with the image it belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub image: usize,
    pub bbox: BBox,
    pub confidence: f64,
}

/// A single-class ground-truth box tagged with its image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthBox {
    pub image: usize,
    pub bbox: BBox,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub confidence: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchOutcome {
    /// Detection indices in processing order: confidence descending, ties
    /// by input index.
    pub order: Vec<usize>,
    /// True-positive label per input detection.
    pub tp: Vec<bool>,
    /// Matched ground-truth index per input detection.
    pub matched: Vec<Option<usize>>,
    /// One point after each processed detection.
    pub pr: Vec<PrPoint>,
    pub num_gt: usize,
}

impl MatchOutcome {
    /// Precision and recall over detections with confidence >= `conf`.
    /// No such detections gives precision 0.
    pub fn operating_point(&self, conf: f64) -> (f64, f64) {
        match self.pr.iter().rposition(|p| p.confidence >= conf) {
            Some(i) => (self.pr[i].precision, self.pr[i].recall),
            None => (0.0, 0.0),
        }
    }
}

/// Greedy matching of one class: each detection, in confidence order, takes
/// the unmatched ground truth in its image with the highest IoU, provided
/// that IoU reaches `iou_threshold`. Ties go to the lower index.
pub fn match_and_pr(dets: &[ScoredBox], gts: &[TruthBox], iou_threshold: f64) -> MatchOutcome {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));
    let mut taken = vec![false; gts.len()];
    let mut tp = vec![false; dets.len()];
    let mut matched = vec![None; dets.len()];
    let mut pr = Vec::with_capacity(dets.len());
    let mut hits = 0usize;
    for (k, &d) in order.iter().enumerate() {
        let det = &dets[d];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] || gt.image != det.image {
                continue;
            }
            let o = iou(&det.bbox, &gt.bbox);
            if o >= iou_threshold && best.is_none_or(|(_, b)| o > b) {
                best = Some((g, o));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            tp[d] = true;
            matched[d] = Some(g);
            hits += 1;
        }
        let recall = if gts.is_empty() { 0.0 } else { hits as f64 / gts.len() as f64 };
        pr.push(PrPoint { confidence: det.confidence, precision: hits as f64 / (k + 1) as f64, recall });
    }
    MatchOutcome { order, tp, matched, pr, num_gt: gts.len() }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApMethod {
    /// Precision envelope sampled at recall 0, 0.01, ..., 1.
    #[default]
    Interp101,
    /// Exact area under the precision envelope.
    Continuous,
}

pub fn average_precision(pr: &[PrPoint], method: ApMethod) -> f64 {
    // envelope[i] = max precision at recall >= recall[i]
    let mut envelope: Vec<(f64, f64)> = pr.iter().map(|p| (p.recall, p.precision)).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i].1 = envelope[i].1.max(envelope[i + 1].1);
    }
    match method {
        ApMethod::Interp101 => {
            let mut sum = 0.0;
            let mut j = 0;
            for i in 0..=100 {
                let r = i as f64 / 100.0;
                while j < envelope.len() && envelope[j].0 < r {
                    j += 1;
                }
                if j < envelope.len() {
                    sum += envelope[j].1;
                }
            }
            sum / 101.0
        }
        ApMethod::Continuous => {
            let mut prev = 0.0;
            let mut area = 0.0;
            for &(r, p) in &envelope {
                area += (r - prev).max(0.0) * p;
                prev = prev.max(r);
            }
            area
        }
    }
}

/// Per-class metrics from one matching pass per IoU threshold.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub ap50: f64,
    pub ap50_95: f64,
    pub num_gt: usize,
    pub num_det: usize,
}

pub fn class_metrics(dets: &[ScoredBox], gts: &[TruthBox], conf_threshold: f64, method: ApMethod) -> ClassMetrics {
    let thresholds = coco_thresholds();
    let aps: Vec<f64> =
        thresholds.iter().map(|&t| average_precision(&match_and_pr(dets, gts, t).pr, method)).collect();
    let (precision, recall) = match_and_pr(dets, gts, 0.5).operating_point(conf_threshold);
    ClassMetrics {
        precision,
        recall,
        ap50: aps[0],
        ap50_95: aps.iter().sum::<f64>() / aps.len() as f64,
        num_gt: gts.len(),
        num_det: dets.len(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Confidence at which the P and R columns are read.
    pub conf_threshold: f64,
    pub ap_method: ApMethod,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { conf_threshold: 0.25, ap_method: ApMethod::Interp101 }
    }
}

/// Builds a report from per-image predictions and ground truth.
pub fn evaluate_detections(
    condition: &str,
    model: &str,
    class_names: &[&str],
    predictions: &[Vec<Detection>],
    truth: &[Vec<GroundTruthBox>],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if predictions.len() != truth.len() {
        return invalid(format!("{} prediction lists for {} images", predictions.len(), truth.len()));
    }
    let k = class_names.len();
    if let Some(bad) = predictions.iter().flatten().find(|d| d.class >= k) {
        return invalid(format!("detection class {} outside the {k}-class taxonomy", bad.class));
    }
    if let Some(bad) = truth.iter().flatten().find(|g| g.class >= k) {
        return invalid(format!("ground-truth class {} outside the {k}-class taxonomy", bad.class));
    }
    let mut rows = Vec::with_capacity(k);
    for (c, name) in class_names.iter().enumerate() {
        let dets: Vec<ScoredBox> = predictions
            .iter()
            .enumerate()
            .flat_map(|(i, ds)| ds.iter().filter(move |d| d.class == c).map(move |d| ScoredBox { image: i, bbox: d.bbox, confidence: d.confidence }))
            .collect();
        let gts: Vec<TruthBox> = truth
            .iter()
            .enumerate()
            .flat_map(|(i, gs)| gs.iter().filter(move |g| g.class == c).map(move |g| TruthBox { image: i, bbox: g.bbox }))
            .collect();
        let m = class_metrics(&dets, &gts, cfg.conf_threshold, cfg.ap_method);
        rows.push(ClassRow {
            class: name.to_string(),
            precision: m.precision,
            recall: m.recall,
            map50: m.ap50,
            map50_95: m.ap50_95,
            gt_boxes: m.num_gt,
            detections: m.num_det,
        });
    }
    let counts = EvalCounts {
        images: truth.len(),
        gt_boxes: truth.iter().map(Vec::len).sum(),
        detections: predictions.iter().map(Vec::len).sum(),
    };
    Ok(EvalReport::new(condition, model, rows, counts))
}
