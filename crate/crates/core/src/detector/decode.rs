use serde::{Deserialize, Serialize};

use super::model::RawPredictions;
use crate::data::BBox;
use crate::error::{invalid, Result};
use crate::eval::{iou, Detection};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub conf_threshold: f64,
    pub iou_threshold: f64,
    pub max_detections: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { conf_threshold: 0.001, iou_threshold: 0.6, max_detections: 300 }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("conf_threshold", self.conf_threshold), ("iou_threshold", self.iou_threshold)] {
            if !(v > 0.0 && v < 1.0) {
                return invalid(format!("{name} {v} outside (0, 1)"));
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Box of cell `(gx, gy)` at `stride` from raw offsets `t = [tx, ty, tw, th]`.
/// Centres may move half a cell outside their own; sides range over
/// `(0, 8 * stride)`.
pub fn decode_box(gx: usize, gy: usize, stride: usize, t: [f64; 4]) -> BBox {
    let s = stride as f64;
    let cx = (gx as f64 + 2.0 * sigmoid(t[0]) - 0.5) * s;
    let cy = (gy as f64 + 2.0 * sigmoid(t[1]) - 0.5) * s;
    let w = (2.0 * sigmoid(t[2])).powi(2) * 2.0 * s;
    let h = (2.0 * sigmoid(t[3])).powi(2) * 2.0 * s;
    BBox::from_center(cx, cy, w, h)
}

/// Every cell whose best class scores above `conf_threshold`, boxes clipped
/// to the image. Confidence is objectness times class probability.
pub fn decode(raw: &RawPredictions, num_classes: usize, width: f64, height: f64, conf_threshold: f64) -> Vec<Detection> {
    let mut out = Vec::new();
    for (stride, t) in &raw.levels {
        let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        debug_assert_eq!(c, 5 + num_classes);
        let d = t.data();
        let at = |ch: usize, y: usize, x: usize| d[(ch * h + y) * w + x] as f64;
        for gy in 0..h {
            for gx in 0..w {
                let obj = sigmoid(at(4, gy, gx));
                let (class, best) = (0..num_classes)
                    .map(|k| (k, at(5 + k, gy, gx)))
                    .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
                let confidence = obj * sigmoid(best);
                if confidence <= conf_threshold {
                    continue;
                }
                let t = [at(0, gy, gx), at(1, gy, gx), at(2, gy, gx), at(3, gy, gx)];
                let bbox = decode_box(gx, gy, *stride, t).clip(width, height);
                if bbox.is_valid() {
                    out.push(Detection { bbox, class, confidence });
                }
            }
        }
    }
    out
}

/// Greedy per-class suppression. The result is sorted by confidence,
/// descending, with input order breaking ties.
pub fn nms(mut dets: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let mut kept: Vec<Detection> = Vec::with_capacity(dets.len());
    for d in dets {
        if kept.iter().all(|k| k.class != d.class || iou(&k.bbox, &d.bbox) <= iou_threshold) {
            kept.push(d);
        }
    }
    kept
}

pub fn decode_and_nms(
    raw: &RawPredictions,
    num_classes: usize,
    width: f64,
    height: f64,
    cfg: &DecodeConfig,
) -> Result<Vec<Detection>> {
    cfg.validate()?;
    let mut out = nms(decode(raw, num_classes, width, height, cfg.conf_threshold), cfg.iou_threshold);
    out.truncate(cfg.max_detections);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use diffyolo_nn::Tensor;
    use proptest::prelude::*;

    fn det(x: f64, y: f64, s: f64, class: usize, confidence: f64) -> Detection {
        Detection { bbox: BBox::new(x, y, x + s, y + s), class, confidence }
    }

    /// Visits detections by confidence and keeps each one unless a kept
    /// detection of the same class overlaps it above the threshold.
    fn oracle(dets: &[Detection], thr: f64) -> Vec<Detection> {
        let mut idx: Vec<usize> = (0..dets.len()).collect();
        idx.sort_by(|&a, &b| dets[b].confidence.partial_cmp(&dets[a].confidence).unwrap().then(a.cmp(&b)));
        let mut keep = vec![false; dets.len()];
        for (pos, &i) in idx.iter().enumerate() {
            keep[i] = idx[..pos].iter().all(|&j| {
                !keep[j] || dets[j].class != dets[i].class || {
                    let a = &dets[i].bbox;
                    let b = &dets[j].bbox;
                    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
                    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
                    let inter = iw * ih;
                    inter / (a.area() + b.area() - inter) <= thr
                }
            });
        }
        idx.into_iter().filter(|&i| keep[i]).map(|i| dets[i]).collect()
    }

    #[test]
    fn duplicate_lower_box_suppressed() {
        let out = nms(vec![det(0.0, 0.0, 10.0, 1, 0.8), det(0.0, 0.0, 10.0, 1, 0.9)], 0.5);
        assert_eq!(out, vec![det(0.0, 0.0, 10.0, 1, 0.9)]);
    }

    #[test]
    fn five_overlapping_boxes_match_oracle() {
        let dets = vec![
            det(0.0, 0.0, 10.0, 0, 0.9),
            det(2.0, 1.0, 10.0, 0, 0.85),
            det(6.0, 6.0, 10.0, 0, 0.8),
            det(1.0, 0.0, 10.0, 1, 0.7),
            det(9.0, 9.0, 10.0, 0, 0.6),
        ];
        let got = nms(dets.clone(), 0.3);
        assert_eq!(got, oracle(&dets, 0.3));
        // IoU(0, 1) = 0.56 and IoU(2, 4) = 0.32; class 1 is never suppressed by class 0
        assert_eq!(got.iter().map(|d| d.confidence).collect::<Vec<_>>(), vec![0.9, 0.8, 0.7]);
    }

    #[test]
    fn nothing_above_threshold_gives_nothing() {
        let mut t = Tensor::full(vec![7, 2, 2], -10.0f32);
        t.data_mut()[..8].fill(0.0);
        let raw = RawPredictions { levels: vec![(8, t)] };
        assert!(decode_and_nms(&raw, 2, 16.0, 16.0, &DecodeConfig::default()).unwrap().is_empty());
        assert!(decode_and_nms(&raw, 2, 16.0, 16.0, &DecodeConfig { iou_threshold: 1.0, ..Default::default() }).is_err());
    }

    #[test]
    fn decoded_box_follows_cell_geometry() {
        // zero offsets: centre in the middle of the cell, side 2 * stride
        let b = decode_box(1, 2, 8, [0.0; 4]);
        assert_eq!((b.center(), b.width(), b.height()), ((12.0, 20.0), 16.0, 16.0));
        let mut t = Tensor::zeros(vec![7, 1, 1]);
        t.data_mut()[4] = 10.0;
        t.data_mut()[6] = 3.0;
        let raw = RawPredictions { levels: vec![(32, t)] };
        let d = decode(&raw, 2, 20.0, 40.0, 0.1);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].class, 1);
        assert_eq!(d[0].bbox, BBox::new(0.0, 0.0, 20.0, 40.0));
    }

    fn detections() -> impl Strategy<Value = Vec<Detection>> {
        prop::collection::vec((0.0f64..30.0, 0.0f64..30.0, 1.0f64..12.0, 0usize..2, 0.0f64..1.0), 0..12)
            .prop_map(|v| v.into_iter().map(|(x, y, s, c, p)| det(x, y, s, c, p)).collect())
    }

    proptest! {
        #[test]
        fn greedy_matches_oracle_and_is_idempotent(dets in detections(), thr in 0.1f64..0.9) {
            let once = nms(dets.clone(), thr);
            prop_assert_eq!(&once, &oracle(&dets, thr));
            prop_assert_eq!(&nms(once.clone(), thr), &once);
            for (i, a) in once.iter().enumerate() {
                for b in &once[i + 1..] {
                    prop_assert!(a.confidence >= b.confidence);
                    prop_assert!(a.class != b.class || iou(&a.bbox, &b.bbox) <= thr);
                }
            }
        }
    }
}
