//! Procedural PCB-like images: copper traces and pads on a textured
//! substrate with parametric defects of the six classes.

use diffyolo_nn::derive_seed;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AnnotatedImage, BBox, GroundTruthBox, NUM_CLASSES};
use crate::error::{invalid, Result};
use crate::image::{ImageTensor, ValueRange};

const OPEN: usize = 0;
const SHORT: usize = 1;
const MOUSE_BITE: usize = 2;
const SPUR: usize = 3;
const COPPER: usize = 4;
const PIN_HOLE: usize = 5;

const PLACEMENT_ATTEMPTS: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub count: usize,
    pub image_size: usize,
    /// Relative frequency of each defect class.
    pub class_weights: [f64; NUM_CLASSES],
    pub min_defects: usize,
    pub max_defects: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self { count: 400, image_size: 64, class_weights: [1.0; NUM_CLASSES], min_defects: 1, max_defects: 4 }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return invalid("synthetic count must be >= 1");
        }
        if self.image_size < 48 {
            return invalid(format!("synthetic image_size must be >= 48, got {}", self.image_size));
        }
        if self.class_weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) || self.class_weights.iter().sum::<f64>() <= 0.0 {
            return invalid("class_weights must be non-negative with a positive sum");
        }
        if self.min_defects == 0 || self.min_defects > self.max_defects {
            return invalid(format!("need 1 <= min_defects <= max_defects, got {}..{}", self.min_defects, self.max_defects));
        }
        Ok(())
    }
}

/// Generates `cfg.count` images with ids `syn00000`, `syn00001`, ... Each
/// image depends only on `(seed, id)`, so a larger count extends a smaller
/// one. Pixel values are multiples of 1/255 so PNG export is lossless.
pub fn generate_synthetic(cfg: &SyntheticConfig, seed: u64) -> Result<Vec<AnnotatedImage>> {
    cfg.validate()?;
    let classes = WeightedIndex::new(cfg.class_weights).map_err(|e| crate::CoreError::Invalid(e.to_string()))?;
    (0..cfg.count)
        .map(|i| {
            let id = format!("syn{i:05}");
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &id));
            let (image, boxes) = render(cfg, &classes, &mut rng);
            Ok(AnnotatedImage { id, image, boxes })
        })
        .collect()
}

#[derive(Clone, Copy, Debug)]
struct Trace {
    horizontal: bool,
    /// First row (horizontal) or column (vertical) covered.
    pos: i64,
    width: i64,
    start: i64,
    end: i64,
}

impl Trace {
    fn xy(&self, along: i64, across: i64) -> (i64, i64) {
        if self.horizontal {
            (along, across)
        } else {
            (across, along)
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Pad {
    x: i64,
    y: i64,
    side: i64,
}

struct Canvas {
    size: i64,
    copper: Vec<bool>,
    pad: Vec<bool>,
    claimed: Vec<bool>,
    traces: Vec<Trace>,
    pads: Vec<Pad>,
}

impl Canvas {
    fn idx(&self, x: i64, y: i64) -> Option<usize> {
        (x >= 0 && y >= 0 && x < self.size && y < self.size).then(|| (y * self.size + x) as usize)
    }

    fn is_copper(&self, x: i64, y: i64) -> Option<bool> {
        self.idx(x, y).map(|i| self.copper[i])
    }

    fn fill(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, pad: bool) {
        for y in y0.max(0)..y1.min(self.size) {
            for x in x0.max(0)..x1.min(self.size) {
                let i = (y * self.size + x) as usize;
                self.copper[i] = true;
                self.pad[i] |= pad;
            }
        }
    }

    /// True when every pixel of the trace-relative region satisfies `want`
    /// (`Some(true)` copper, `Some(false)` substrate) and lies off pads.
    fn region(&self, t: &Trace, along: (i64, i64), across: (i64, i64), want: bool) -> bool {
        (along.0..along.1).all(|a| {
            (across.0..across.1).all(|c| {
                let (x, y) = t.xy(a, c);
                self.idx(x, y).is_some_and(|i| self.copper[i] == want && !self.pad[i])
            })
        })
    }

    fn rect(&self, x0: i64, y0: i64, x1: i64, y1: i64, f: impl Fn(usize) -> bool) -> bool {
        (y0..y1).all(|y| (x0..x1).all(|x| self.idx(x, y).is_some_and(&f)))
    }

    /// Applies `pixels -> value`, returning the ground-truth box of the
    /// pixels that changed, or `None` if the edit is empty, too close to the
    /// border or to an earlier defect.
    fn commit(&mut self, pixels: &[(i64, i64)], value: bool) -> Option<BBox> {
        let changed: Vec<(i64, i64)> =
            pixels.iter().copied().filter(|&(x, y)| self.is_copper(x, y).is_some_and(|c| c != value)).collect();
        if changed.is_empty() {
            return None;
        }
        let x0 = changed.iter().map(|p| p.0).min()? - 1;
        let y0 = changed.iter().map(|p| p.1).min()? - 1;
        let x1 = changed.iter().map(|p| p.0).max()? + 2;
        let y1 = changed.iter().map(|p| p.1).max()? + 2;
        if x0 < 0 || y0 < 0 || x1 > self.size || y1 > self.size {
            return None;
        }
        let free = (y0 - 2..y1 + 2).all(|y| (x0 - 2..x1 + 2).all(|x| self.idx(x, y).is_none_or(|i| !self.claimed[i])));
        if !free {
            return None;
        }
        for &(x, y) in &changed {
            let i = self.idx(x, y)?;
            self.copper[i] = value;
        }
        for y in y0..y1 {
            for x in x0..x1 {
                let i = self.idx(x, y)?;
                self.claimed[i] = true;
            }
        }
        Some(BBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64))
    }
}

fn render(cfg: &SyntheticConfig, classes: &WeightedIndex<f64>, rng: &mut ChaCha8Rng) -> (ImageTensor, Vec<GroundTruthBox>) {
    loop {
        let mut canvas = layout(cfg.image_size as i64, rng);
        let wanted = rng.random_range(cfg.min_defects..=cfg.max_defects);
        let mut boxes = Vec::new();
        for _ in 0..wanted {
            let class = classes.sample(rng);
            if let Some(bbox) = (0..PLACEMENT_ATTEMPTS).find_map(|_| place(&mut canvas, class, rng)) {
                boxes.push(GroundTruthBox { bbox, class });
            }
        }
        if boxes.len() >= cfg.min_defects {
            return (shade(&canvas, rng), boxes);
        }
    }
}

fn layout(size: i64, rng: &mut ChaCha8Rng) -> Canvas {
    let n = (size * size) as usize;
    let mut c = Canvas {
        size,
        copper: vec![false; n],
        pad: vec![false; n],
        claimed: vec![false; n],
        traces: Vec::new(),
        pads: Vec::new(),
    };
    for horizontal in [true, false] {
        let mut pos = rng.random_range(6..=12);
        let limit = if horizontal { 3 } else { 2 };
        let mut placed = 0;
        while placed < limit && pos + 4 <= size - 6 {
            let width = rng.random_range(4..=6);
            let (start, end) = if horizontal {
                (rng.random_range(0..=size / 6), rng.random_range(size - size / 6..=size))
            } else {
                let len = rng.random_range(size / 3..=size * 2 / 3);
                let start = rng.random_range(0..=size - len);
                (start, start + len)
            };
            c.traces.push(Trace { horizontal, pos, width, start, end });
            pos += width + rng.random_range(if horizontal { 9..=14 } else { 14..=24 });
            placed += 1;
            if !horizontal && rng.random_bool(0.5) {
                break;
            }
        }
    }
    for t in c.traces.clone() {
        let (x0, y0) = t.xy(t.start, t.pos);
        let (x1, y1) = t.xy(t.end, t.pos + t.width);
        c.fill(x0, y0, x1, y1, false);
    }
    let wanted_pads = rng.random_range(2..=4);
    for _ in 0..wanted_pads * 10 {
        if c.pads.len() >= wanted_pads {
            break;
        }
        let t = c.traces[rng.random_range(0..c.traces.len())];
        if t.end - t.start < 12 {
            continue;
        }
        let side = rng.random_range(9..=12);
        let along = rng.random_range(t.start + 4..=t.end - 4);
        let (cx, cy) = t.xy(along, t.pos + t.width / 2);
        let (x, y) = (cx - side / 2, cy - side / 2);
        let overlaps = c.pads.iter().any(|p| x < p.x + p.side + 3 && p.x < x + side + 3 && y < p.y + p.side + 3 && p.y < y + side + 3);
        if x < 2 || y < 2 || x + side > size - 2 || y + side > size - 2 || overlaps {
            continue;
        }
        c.fill(x, y, x + side, y + side, true);
        c.pads.push(Pad { x, y, side });
    }
    c
}

fn place(c: &mut Canvas, class: usize, rng: &mut ChaCha8Rng) -> Option<BBox> {
    let t = c.traces[rng.random_range(0..c.traces.len())];
    let (pos, w) = (t.pos, t.width);
    match class {
        OPEN => {
            let gap = rng.random_range(3..=6);
            let a = rng.random_range(t.start + 3..=(t.end - 3 - gap).max(t.start + 3));
            let ok = c.region(&t, (a - 2, a + gap + 2), (pos, pos + w), true)
                && c.region(&t, (a - 2, a + gap + 2), (pos - 2, pos), false)
                && c.region(&t, (a - 2, a + gap + 2), (pos + w, pos + w + 2), false);
            if !ok {
                return None;
            }
            let px: Vec<_> = (a..a + gap).flat_map(|i| (pos..pos + w).map(move |j| t.xy(i, j))).collect();
            c.commit(&px, false)
        }
        SHORT => {
            let mut peers: Vec<Trace> =
                c.traces.iter().copied().filter(|o| o.horizontal == t.horizontal && o.pos > pos + w).collect();
            peers.sort_by_key(|o| o.pos);
            let other = *peers.first()?;
            let (lo, hi) = (t.start.max(other.start) + 2, t.end.min(other.end) - 4);
            if hi <= lo {
                return None;
            }
            let bw = rng.random_range(2..=4);
            let a = rng.random_range(lo..hi);
            if !c.region(&t, (a - 2, a + bw + 2), (pos + w, other.pos), false) {
                return None;
            }
            let px: Vec<_> = (a..a + bw).flat_map(|i| (pos + w..other.pos).map(move |j| t.xy(i, j))).collect();
            c.commit(&px, true)
        }
        MOUSE_BITE => {
            let r: f64 = rng.random_range(2.2..3.2);
            let a = rng.random_range(t.start + 5..=(t.end - 6).max(t.start + 5));
            let top = rng.random_bool(0.5);
            let (edge, outside) = if top { (pos, (pos - 3, pos)) } else { (pos + w, (pos + w, pos + w + 3)) };
            if !(c.region(&t, (a - 5, a + 6), (pos, pos + w), true) && c.region(&t, (a - 5, a + 6), outside, false)) {
                return None;
            }
            let ca = a as f64 + 0.5;
            let px: Vec<_> = (a - 4..=a + 4)
                .flat_map(|i| (pos..pos + w).map(move |j| (i, j)))
                .filter(|&(i, j)| {
                    let (di, dj) = (i as f64 + 0.5 - ca, j as f64 + 0.5 - edge as f64);
                    di * di + dj * dj <= r * r
                })
                .map(|(i, j)| t.xy(i, j))
                .collect();
            c.commit(&px, false)
        }
        SPUR => {
            let sw = rng.random_range(2..=3);
            let len = rng.random_range(4..=7);
            let a = rng.random_range(t.start + 3..=(t.end - 3 - sw).max(t.start + 3));
            let top = rng.random_bool(0.5);
            let (span, clear) =
                if top { ((pos - len, pos), (pos - len - 2, pos)) } else { ((pos + w, pos + w + len), (pos + w, pos + w + len + 2)) };
            if !(c.region(&t, (a - 2, a + sw + 2), (pos, pos + w), true) && c.region(&t, (a - 2, a + sw + 2), clear, false)) {
                return None;
            }
            let px: Vec<_> = (a..a + sw).flat_map(|i| (span.0..span.1).map(move |j| t.xy(i, j))).collect();
            c.commit(&px, true)
        }
        COPPER => {
            let (rx, ry): (f64, f64) = (rng.random_range(2.2..4.0), rng.random_range(2.2..4.0));
            let size = c.size as f64;
            let (cx, cy): (f64, f64) = (rng.random_range(4.0..size - 4.0), rng.random_range(4.0..size - 4.0));
            let (x0, y0) = ((cx - rx).floor() as i64 - 2, (cy - ry).floor() as i64 - 2);
            let (x1, y1) = ((cx + rx).ceil() as i64 + 2, (cy + ry).ceil() as i64 + 2);
            if !c.rect(x0, y0, x1, y1, |i| !c.copper[i]) {
                return None;
            }
            let px: Vec<_> = (y0..y1)
                .flat_map(|y| (x0..x1).map(move |x| (x, y)))
                .filter(|&(x, y)| {
                    let (dx, dy) = ((x as f64 + 0.5 - cx) / rx, (y as f64 + 0.5 - cy) / ry);
                    dx * dx + dy * dy <= 1.0
                })
                .collect();
            if px.len() < 4 {
                return None;
            }
            c.commit(&px, true)
        }
        PIN_HOLE => {
            if c.pads.is_empty() {
                return None;
            }
            let p = c.pads[rng.random_range(0..c.pads.len())];
            let r: f64 = rng.random_range(1.5..2.4);
            let lo = p.x as f64 + r + 1.0;
            let span = p.side as f64 - 2.0 * (r + 1.0);
            if span <= 0.0 {
                return None;
            }
            let cx = lo + rng.random_range(0.0..span);
            let cy = p.y as f64 + r + 1.0 + rng.random_range(0.0..span);
            let px: Vec<_> = (p.y..p.y + p.side)
                .flat_map(|y| (p.x..p.x + p.side).map(move |x| (x, y)))
                .filter(|&(x, y)| {
                    let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    dx * dx + dy * dy <= r * r
                })
                .collect();
            if px.len() < 3 || !px.iter().all(|&(x, y)| c.idx(x, y).is_some_and(|i| c.pad[i] && c.copper[i])) {
                return None;
            }
            c.commit(&px, false)
        }
        _ => None,
    }
}

fn shade(c: &Canvas, rng: &mut ChaCha8Rng) -> ImageTensor {
    let substrate: f64 = rng.random_range(0.08..0.18);
    let metal: f64 = rng.random_range(0.72..0.88);
    let data = c
        .copper
        .iter()
        .map(|&cu| {
            let base = if cu { metal } else { substrate };
            let v = (base + rng.random_range(-0.03..0.03)).clamp(0.0, 1.0);
            ((v * 255.0).round() / 255.0) as f32
        })
        .collect();
    let s = c.size as usize;
    ImageTensor::new(1, s, s, data, ValueRange::Unit).expect("generator produces finite pixels")
}
