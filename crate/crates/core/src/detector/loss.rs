use diffyolo_nn::{Element, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::model::STRIDES;
use crate::data::{BBox, GroundTruthBox};
use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    #[serde(rename = "box")]
    pub bbox: f64,
    pub obj: f64,
    pub cls: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { bbox: 1.0, obj: 4.0, cls: 1.0 }
    }
}

/// One ground-truth box bound to the cell responsible for it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Target {
    pub batch: usize,
    /// Index into [`STRIDES`].
    pub level: usize,
    pub gy: usize,
    pub gx: usize,
    pub bbox: BBox,
    pub class: usize,
}

/// Level whose stride is the smallest with `max side <= 4 * stride`.
pub fn level_for(bbox: &BBox) -> usize {
    let side = bbox.width().max(bbox.height());
    STRIDES.iter().position(|&s| side <= 4.0 * s as f64).unwrap_or(STRIDES.len() - 1)
}

/// Centre-cell assignment. When two boxes land in the same cell the smaller
/// one keeps it.
pub fn assign_targets(truth: &[Vec<GroundTruthBox>], input_size: usize) -> Vec<Target> {
    let mut targets: Vec<Target> = Vec::new();
    for (batch, boxes) in truth.iter().enumerate() {
        for gt in boxes {
            let level = level_for(&gt.bbox);
            let s = STRIDES[level] as f64;
            let n = input_size / STRIDES[level];
            let (cx, cy) = gt.bbox.center();
            let cell = |c: f64| ((c / s).floor().max(0.0) as usize).min(n - 1);
            let t = Target { batch, level, gy: cell(cy), gx: cell(cx), bbox: gt.bbox, class: gt.class };
            match targets
                .iter_mut()
                .find(|o| (o.batch, o.level, o.gy, o.gx) == (t.batch, t.level, t.gy, t.gx))
            {
                Some(o) if t.bbox.area() < o.bbox.area() => *o = t,
                Some(_) => {}
                None => targets.push(t),
            }
        }
    }
    targets
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    #[serde(rename = "box")]
    pub bbox: f64,
    pub obj: f64,
    pub cls: f64,
    pub positives: usize,
}

pub struct LossVars {
    pub total: Var,
    pub bbox: Var,
    pub obj: Var,
    pub cls: Var,
}

fn constant<T: Element>(g: &mut Graph<T>, values: Vec<f64>) -> Result<Var> {
    let n = values.len();
    Ok(g.constant(Tensor::new(vec![n], values.into_iter().map(T::from_f64_lossy).collect())?))
}

/// Sum over the rows of `1 - GIoU(decoded, target)` for the positives of one
/// level; `rows` is the gathered `[p, 5 + K]` prediction matrix.
fn giou_loss_sum<T: Element>(g: &mut Graph<T>, rows: Var, stride: usize, targets: &[&Target]) -> Result<Var> {
    let s = stride as f64;
    let col = |g: &mut Graph<T>, i| g.column(rows, i);
    let centre = |g: &mut Graph<T>, i: usize, grid: Vec<f64>| -> Result<Var> {
        let t = col(g, i)?;
        let sg = g.sigmoid(t);
        let off = g.scale(sg, 2.0 * s);
        let base = constant(g, grid.iter().map(|c| (c - 0.5) * s).collect())?;
        Ok(g.add(off, base)?)
    };
    let cx = centre(g, 0, targets.iter().map(|t| t.gx as f64).collect())?;
    let cy = centre(g, 1, targets.iter().map(|t| t.gy as f64).collect())?;
    let side = |g: &mut Graph<T>, i: usize| -> Result<Var> {
        let t = col(g, i)?;
        let sg = g.sigmoid(t);
        let sq = g.square(sg);
        Ok(g.scale(sq, 8.0 * s))
    };
    let w = side(g, 2)?;
    let h = side(g, 3)?;
    let hw = g.scale(w, 0.5);
    let hh = g.scale(h, 0.5);
    let px1 = g.sub(cx, hw)?;
    let px2 = g.add(cx, hw)?;
    let py1 = g.sub(cy, hh)?;
    let py2 = g.add(cy, hh)?;
    let gx1 = constant(g, targets.iter().map(|t| t.bbox.x1).collect())?;
    let gx2 = constant(g, targets.iter().map(|t| t.bbox.x2).collect())?;
    let gy1 = constant(g, targets.iter().map(|t| t.bbox.y1).collect())?;
    let gy2 = constant(g, targets.iter().map(|t| t.bbox.y2).collect())?;
    let garea = constant(g, targets.iter().map(|t| t.bbox.area()).collect())?;

    let extent = |g: &mut Graph<T>, a1, a2, b1, b2| -> Result<(Var, Var)> {
        let lo = g.maximum(a1, b1)?;
        let hi = g.minimum(a2, b2)?;
        let d = g.sub(hi, lo)?;
        let inner = g.relu(d);
        let lo = g.minimum(a1, b1)?;
        let hi = g.maximum(a2, b2)?;
        let outer = g.sub(hi, lo)?;
        Ok((inner, outer))
    };
    let (iw, cw) = extent(g, px1, px2, gx1, gx2)?;
    let (ih, ch) = extent(g, py1, py2, gy1, gy2)?;
    let inter = g.mul(iw, ih)?;
    let parea = g.mul(w, h)?;
    let sum = g.add(parea, garea)?;
    let union = g.sub(sum, inter)?;
    let union = g.add_scalar(union, 1e-9);
    let iou = g.div(inter, union)?;
    let hull = g.mul(cw, ch)?;
    let hull = g.add_scalar(hull, 1e-9);
    let gap = g.sub(hull, union)?;
    let penalty = g.div(gap, hull)?;
    let giou = g.sub(iou, penalty)?;
    let neg = g.scale(giou, -1.0);
    let per = g.add_scalar(neg, 1.0);
    Ok(g.sum(per))
}

fn add_opt<T: Element>(g: &mut Graph<T>, acc: Option<Var>, v: Var) -> Result<Option<Var>> {
    Ok(Some(match acc {
        Some(a) => g.add(a, v)?,
        None => v,
    }))
}

fn zero<T: Element>(g: &mut Graph<T>) -> Var {
    g.constant(Tensor::scalar(T::zero()))
}

/// Box (`1 - GIoU` over positives), objectness (BCE averaged over every
/// cell) and class (BCE averaged over positives × classes) losses.
/// `outputs` are the per-stride `[n, 5 + K, h, w]` predictions.
pub fn detection_loss<T: Element>(
    g: &mut Graph<T>,
    outputs: &[Var],
    truth: &[Vec<GroundTruthBox>],
    input_size: usize,
    num_classes: usize,
    weights: &LossWeights,
) -> Result<(LossVars, LossComponents)> {
    if outputs.len() != STRIDES.len() {
        return Err(CoreError::Shape(format!("{} prediction levels, expected {}", outputs.len(), STRIDES.len())));
    }
    for &o in outputs {
        let (n, c, _, _) = g.value(o).dims4()?;
        if n != truth.len() || c != 5 + num_classes {
            return Err(CoreError::Shape(format!("predictions {:?} for {} images and {num_classes} classes", g.shape(o), truth.len())));
        }
    }
    let targets = assign_targets(truth, input_size);
    let positives = targets.len();
    let (mut box_sum, mut obj_sum, mut cls_sum) = (None, None, None);
    let mut cells = 0usize;
    for (level, (&out, &stride)) in outputs.iter().zip(&STRIDES).enumerate() {
        let (n, _, h, w) = g.value(out).dims4()?;
        let all: Vec<(usize, usize, usize)> =
            (0..n).flat_map(|b| (0..h).flat_map(move |y| (0..w).map(move |x| (b, y, x)))).collect();
        cells += all.len();
        let mut obj_target = vec![T::zero(); all.len()];
        let mine: Vec<&Target> = targets.iter().filter(|t| t.level == level).collect();
        for t in &mine {
            obj_target[(t.batch * h + t.gy) * w + t.gx] = T::one();
        }
        let rows = g.gather_cells(out, &all)?;
        let obj = g.column(rows, 4)?;
        let bce = g.bce_with_logits(obj, Tensor::new(vec![all.len()], obj_target)?)?;
        let s = g.sum(bce);
        obj_sum = add_opt(g, obj_sum, s)?;
        if mine.is_empty() {
            continue;
        }
        let pos: Vec<(usize, usize, usize)> = mine.iter().map(|t| (t.batch, t.gy, t.gx)).collect();
        let prow = g.gather_cells(out, &pos)?;
        let l = giou_loss_sum(g, prow, stride, &mine)?;
        box_sum = add_opt(g, box_sum, l)?;
        for k in 0..num_classes {
            let logit = g.column(prow, 5 + k)?;
            let y = mine.iter().map(|t| if t.class == k { T::one() } else { T::zero() }).collect();
            let bce = g.bce_with_logits(logit, Tensor::new(vec![mine.len()], y)?)?;
            let s = g.sum(bce);
            cls_sum = add_opt(g, cls_sum, s)?;
        }
    }
    let obj = g.scale(obj_sum.expect("three levels"), 1.0 / cells.max(1) as f64);
    let (bbox, cls) = match (box_sum, cls_sum) {
        (Some(b), Some(c)) => (g.scale(b, 1.0 / positives as f64), g.scale(c, 1.0 / (positives * num_classes) as f64)),
        _ => (zero(g), zero(g)),
    };
    let wb = g.scale(bbox, weights.bbox);
    let wo = g.scale(obj, weights.obj);
    let wc = g.scale(cls, weights.cls);
    let total = g.add(wb, wo)?;
    let total = g.add(total, wc)?;
    let v = |g: &Graph<T>, x: Var| g.value(x).data()[0].to_f64_lossy();
    let comps = LossComponents { total: v(g, total), bbox: v(g, bbox), obj: v(g, obj), cls: v(g, cls), positives };
    Ok((LossVars { total, bbox, obj, cls }, comps))
}
