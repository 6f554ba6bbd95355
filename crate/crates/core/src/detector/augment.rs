//! Label-preserving training augmentation: the eight flips and quarter
//! turns of the square, followed by a translation that keeps every box
//! inside the image. Edges are replicated into the uncovered border.

use diffyolo_nn::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BBox, GroundTruthBox};
use crate::error::{CoreError, Result};
use crate::features::FeatureTaps;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Augment {
    /// Random flips and quarter turns.
    pub dihedral: bool,
    /// Largest translation in pixels per axis. With injected features the
    /// shift is drawn in whole feature cells so both inputs stay aligned.
    pub max_shift: usize,
}

impl Default for Augment {
    fn default() -> Self {
        Self { dihedral: true, max_shift: 16 }
    }
}

impl Augment {
    pub fn none() -> Self {
        Self { dihedral: false, max_shift: 0 }
    }

    pub fn is_identity(&self) -> bool {
        !self.dihedral && self.max_shift == 0
    }

    /// Draws a transform for an `size`-pixel image whose boxes are `truth`;
    /// shifts are multiples of `quantum` pixels.
    pub fn sample(&self, rng: &mut impl Rng, size: usize, quantum: usize, truth: &[GroundTruthBox]) -> Transform {
        let op = if self.dihedral { rng.random_range(0..8u8) } else { 0 };
        let mut t = Transform { op, dx: 0, dy: 0 };
        let q = quantum.max(1) as i64;
        let m = self.max_shift as i64 / q;
        if m > 0 {
            let n = size as f64;
            let boxes: Vec<BBox> = truth.iter().map(|b| t.apply_box(&b.bbox, n)).collect();
            let lo_x = boxes.iter().map(|b| b.x1).fold(n, f64::min);
            let lo_y = boxes.iter().map(|b| b.y1).fold(n, f64::min);
            let hi_x = boxes.iter().map(|b| b.x2).fold(0.0, f64::max);
            let hi_y = boxes.iter().map(|b| b.y2).fold(0.0, f64::max);
            let range = |lo: f64, hi: f64| {
                let a = (-m).max((-lo / q as f64).ceil() as i64);
                let b = m.min(((n - hi) / q as f64).floor() as i64);
                (a.min(0), b.max(0))
            };
            let (ax, bx) = range(lo_x, hi_x);
            let (ay, by) = range(lo_y, hi_y);
            t.dx = rng.random_range(ax..=bx) * q;
            t.dy = rng.random_range(ay..=by) * q;
        }
        t
    }
}

/// Dihedral op (bit 0 flips x, bit 1 flips y, bit 2 transposes first)
/// followed by a shift of `(dx, dy)` pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Transform {
    pub op: u8,
    pub dx: i64,
    pub dy: i64,
}

impl Transform {
    pub const IDENTITY: Transform = Transform { op: 0, dx: 0, dy: 0 };

    fn dihedral(&self, x: f64, y: f64, n: f64) -> (f64, f64) {
        let (mut x, mut y) = if self.op & 4 != 0 { (y, x) } else { (x, y) };
        if self.op & 1 != 0 {
            x = n - x;
        }
        if self.op & 2 != 0 {
            y = n - y;
        }
        (x, y)
    }

    pub fn apply_box(&self, b: &BBox, n: f64) -> BBox {
        let (ax, ay) = self.dihedral(b.x1, b.y1, n);
        let (bx, by) = self.dihedral(b.x2, b.y2, n);
        let (dx, dy) = (self.dx as f64, self.dy as f64);
        BBox::new(ax.min(bx) + dx, ay.min(by) + dy, ax.max(bx) + dx, ay.max(by) + dy)
    }

    pub fn apply_boxes(&self, truth: &[GroundTruthBox], n: usize) -> Vec<GroundTruthBox> {
        truth.iter().map(|g| GroundTruthBox { bbox: self.apply_box(&g.bbox, n as f64), class: g.class }).collect()
    }

    /// Transforms a square `[c, n, n]` map. `scale` is pixels per element,
    /// so a feature map at stride 8 takes `scale = 8`.
    pub fn apply_map(&self, t: &Tensor<f32>, scale: usize) -> Result<Tensor<f32>> {
        let &[c, h, w] = t.shape() else {
            return Err(CoreError::Shape(format!("expected a [c, n, n] map, got {:?}", t.shape())));
        };
        let s = scale as i64;
        if h != w || self.dx % s != 0 || self.dy % s != 0 {
            return Err(CoreError::Shape(format!("cannot shift a {h}x{w} map by ({}, {}) at scale {scale}", self.dx, self.dy)));
        }
        let n = h as i64;
        let (sx, sy) = (self.dx / s, self.dy / s);
        let src = t.data();
        let mut out = vec![0.0f32; src.len()];
        for y in 0..n {
            for x in 0..n {
                // undo the shift, clamping into the image, then undo the dihedral op
                let (mut u, mut v) = ((x - sx).clamp(0, n - 1), (y - sy).clamp(0, n - 1));
                if self.op & 1 != 0 {
                    u = n - 1 - u;
                }
                if self.op & 2 != 0 {
                    v = n - 1 - v;
                }
                if self.op & 4 != 0 {
                    std::mem::swap(&mut u, &mut v);
                }
                for ch in 0..c {
                    out[(ch * h + y as usize) * w + x as usize] = src[(ch * h + v as usize) * w + u as usize];
                }
            }
        }
        Ok(Tensor::new(vec![c, h, w], out)?)
    }

    pub fn apply_taps(&self, taps: &FeatureTaps, image_size: usize) -> Result<FeatureTaps> {
        let mut out = taps.clone();
        for m in &mut out.maps {
            let r = m.data.shape()[1];
            m.data = self.apply_map(&m.data, image_size / r)?;
        }
        Ok(out)
    }
}
