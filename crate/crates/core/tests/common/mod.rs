//! Brute-force metric oracles and fixture loading shared by integration tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use diffyolo_core::data::BBox;
use diffyolo_core::eval::{ScoredBox, TruthBox};
use serde::Deserialize;

#[derive(Debug, Deserialize)]
pub struct MetricFixture {
    pub detections: Vec<ScoredBox>,
    pub truth: Vec<TruthBox>,
    #[serde(default)]
    pub expected_tp: Option<Vec<bool>>,
    #[serde(default)]
    pub expected_ap50: Option<f64>,
}

pub fn fixture_dir(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn metric_fixtures() -> Vec<(String, MetricFixture)> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(fixture_dir("metrics"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let f: MetricFixture = serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
            (p.file_name().unwrap().to_string_lossy().into_owned(), f)
        })
        .collect()
}

fn overlap(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = w * h;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Detection indices by confidence descending, ties by index.
pub fn confidence_order(dets: &[ScoredBox]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    // insertion sort keeps equal keys in input order
    for i in 1..order.len() {
        let mut j = i;
        while j > 0 && dets[order[j - 1]].confidence < dets[order[j]].confidence {
            order.swap(j - 1, j);
            j -= 1;
        }
    }
    order
}

/// Tries every injective partial assignment of detections to ground truth
/// and keeps one with the most true positives; among those, the one whose
/// labels in confidence order are lexicographically largest.
/// Returns labels indexed like `dets`.
pub fn exhaustive_assignment(dets: &[ScoredBox], gts: &[TruthBox], thr: f64) -> Vec<bool> {
    let order = confidence_order(dets);
    let mut best: Option<(usize, Vec<bool>)> = None;
    let mut used = vec![false; gts.len()];
    let mut labels = Vec::with_capacity(order.len());
    #[allow(clippy::too_many_arguments)]
    fn rec(
        k: usize,
        order: &[usize],
        dets: &[ScoredBox],
        gts: &[TruthBox],
        thr: f64,
        used: &mut Vec<bool>,
        labels: &mut Vec<bool>,
        best: &mut Option<(usize, Vec<bool>)>,
    ) {
        if k == order.len() {
            let tp = labels.iter().filter(|&&l| l).count();
            let better = match best {
                None => true,
                Some((b, bl)) => tp > *b || (tp == *b && labels.as_slice() > bl.as_slice()),
            };
            if better {
                *best = Some((tp, labels.clone()));
            }
            return;
        }
        let d = &dets[order[k]];
        for g in 0..gts.len() {
            if !used[g] && gts[g].image == d.image && overlap(&d.bbox, &gts[g].bbox) >= thr {
                used[g] = true;
                labels.push(true);
                rec(k + 1, order, dets, gts, thr, used, labels, best);
                labels.pop();
                used[g] = false;
            }
        }
        labels.push(false);
        rec(k + 1, order, dets, gts, thr, used, labels, best);
        labels.pop();
    }
    rec(0, &order, dets, gts, thr, &mut used, &mut labels, &mut best);
    let in_order = best.map(|b| b.1).unwrap_or_default();
    let mut out = vec![false; dets.len()];
    for (k, &d) in order.iter().enumerate() {
        out[d] = in_order[k];
    }
    out
}

/// Number of true positives among the top `k` detections, matching the
/// prefix from scratch.
fn prefix_hits(dets: &[ScoredBox], gts: &[TruthBox], thr: f64, order: &[usize], k: usize) -> usize {
    let mut used = vec![false; gts.len()];
    let mut hits = 0;
    for &d in &order[..k] {
        let mut cands: Vec<(f64, usize)> = (0..gts.len())
            .filter(|&g| !used[g] && gts[g].image == dets[d].image)
            .map(|g| (overlap(&dets[d].bbox, &gts[g].bbox), g))
            .filter(|&(o, _)| o >= thr)
            .collect();
        cands.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        if let Some(&(_, g)) = cands.first() {
            used[g] = true;
            hits += 1;
        }
    }
    hits
}

/// AP by enumerating every confidence cut, recomputing matching for each
/// prefix and sampling the precision envelope at 101 recall levels.
pub fn brute_force_ap(dets: &[ScoredBox], gts: &[TruthBox], thr: f64) -> f64 {
    let order = confidence_order(dets);
    let points: Vec<(f64, f64)> = (1..=dets.len())
        .map(|k| {
            let hits = prefix_hits(dets, gts, thr, &order, k);
            let recall = if gts.is_empty() { 0.0 } else { hits as f64 / gts.len() as f64 };
            (hits as f64 / k as f64, recall)
        })
        .collect();
    let mut total = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        total += points.iter().filter(|p| p.1 >= r).map(|p| p.0).fold(0.0, f64::max);
    }
    total / 101.0
}

/// Brute-force mean AP over IoU 0.50:0.05:0.95.
pub fn brute_force_ap_range(dets: &[ScoredBox], gts: &[TruthBox]) -> f64 {
    (0..10).map(|i| brute_force_ap(dets, gts, (50 + 5 * i) as f64 / 100.0)).sum::<f64>() / 10.0
}

pub mod gradcheck;
