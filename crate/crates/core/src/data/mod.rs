//! Annotated PCB images: the DeepPCB loader, the synthetic generator and
//! train/val/test splitting.

mod deeppcb;
mod synthetic;

use std::fs;
use std::path::Path;

use diffyolo_nn::kernels::resize_bilinear;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::image::{ImageTensor, ValueRange};

pub use deeppcb::{load_deeppcb, parse_annotations};
pub use synthetic::{generate_synthetic, SyntheticConfig};

/// Defect classes in index order.
pub const CLASS_NAMES: [&str; 6] = ["open", "short", "mouse_bite", "spur", "copper", "pin_hole"];
pub const NUM_CLASSES: usize = CLASS_NAMES.len();

/// Axis-aligned box in pixel-edge coordinates: a box covering pixel columns
/// `a..b` has `x1 = a`, `x2 = b`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite()) && self.x2 > self.x1 && self.y2 > self.y1
    }

    pub fn clip(&self, width: f64, height: f64) -> Self {
        Self::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
    }

    pub fn scale(&self, sx: f64, sy: f64) -> Self {
        Self::new(self.x1 * sx, self.y1 * sy, self.x2 * sx, self.y2 * sy)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub bbox: BBox,
    pub class: usize,
}

#[derive(Clone, Debug)]
pub struct AnnotatedImage {
    pub id: String,
    pub image: ImageTensor,
    pub boxes: Vec<GroundTruthBox>,
}

impl AnnotatedImage {
    /// Checks that the image is in `[0, 1]` and every box is valid, inside
    /// the image and of a known class.
    pub fn validate(&self) -> Result<()> {
        if self.image.range() != ValueRange::Unit {
            return invalid(format!("{}: dataset images must be in [0, 1]", self.id));
        }
        let (w, h) = (self.image.width() as f64, self.image.height() as f64);
        for (i, b) in self.boxes.iter().enumerate() {
            let bb = b.bbox;
            if !bb.is_valid() || bb.x1 < 0.0 || bb.y1 < 0.0 || bb.x2 > w || bb.y2 > h {
                return invalid(format!("{}: box {i} {bb:?} outside {w}x{h} image or empty", self.id));
            }
            if b.class >= NUM_CLASSES {
                return invalid(format!("{}: box {i} has class {} (expected < {NUM_CLASSES})", self.id, b.class));
            }
        }
        Ok(())
    }

    /// Bilinear resize to `size`x`size`; boxes are scaled with the image.
    pub fn resized(&self, size: usize) -> Result<AnnotatedImage> {
        let (c, h, w) = self.image.shape();
        if (h, w) == (size, size) {
            return Ok(self.clone());
        }
        let data = resize_bilinear(self.image.data(), c, h, w, size, size);
        let image = ImageTensor::new(c, size, size, data, ValueRange::Unit)?;
        let (sx, sy) = (size as f64 / w as f64, size as f64 / h as f64);
        let boxes = self
            .boxes
            .iter()
            .map(|b| GroundTruthBox { bbox: b.bbox.scale(sx, sy), class: b.class })
            .collect();
        Ok(AnnotatedImage { id: self.id.clone(), image, boxes })
    }

    /// Annotation text: one `x1 y1 x2 y2 class` line per box, classes 1-indexed.
    pub fn annotation_text(&self) -> String {
        self.boxes
            .iter()
            .map(|b| format!("{} {} {} {} {}\n", b.bbox.x1, b.bbox.y1, b.bbox.x2, b.bbox.y2, b.class + 1))
            .collect()
    }
}

/// Writes each image as `<id>.png` and its annotations as `<id>.txt`, the
/// layout [`load_deeppcb`] reads back.
pub fn export_dataset(images: &[AnnotatedImage], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for item in images {
        let (c, h, w) = item.image.shape();
        let png = dir.join(format!("{}.png", item.id));
        if let Some(parent) = png.parent() {
            fs::create_dir_all(parent)?;
        }
        let to_u8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let plane = h * w;
        match c {
            1 => {
                let buf = item.image.data().iter().map(|&v| to_u8(v)).collect();
                ::image::GrayImage::from_raw(w as u32, h as u32, buf).expect("buffer size").save(&png)?;
            }
            3 => {
                let d = item.image.data();
                let buf = (0..plane).flat_map(|p| (0..3).map(move |ch| to_u8(d[ch * plane + p]))).collect();
                ::image::RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer size").save(&png)?;
            }
            _ => return invalid(format!("cannot export {c}-channel image")),
        }
        fs::write(dir.join(format!("{}.txt", item.id)), item.annotation_text())?;
    }
    Ok(())
}

/// Fractions of ids assigned to train, val and test.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self { train: 0.8, val: 0.1, test: 0.1 }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|r| !(0.0..=1.0).contains(r)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return invalid(format!("split ratios must lie in [0, 1] and sum to 1, got {parts:?}"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn part(&self, name: &str) -> Result<&[String]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => invalid(format!("unknown split `{other}` (expected train, val or test)")),
        }
    }
}

/// Sorts and shuffles `ids` with `seed`, then cuts: val and test get
/// `floor(n * ratio)` ids each, train gets the rest.
pub fn split(ids: &[String], ratios: SplitRatios, seed: u64) -> Result<DatasetSplit> {
    ratios.validate()?;
    if ids.is_empty() {
        return invalid("cannot split an empty id list");
    }
    let mut shuffled = ids.to_vec();
    shuffled.sort();
    shuffled.dedup();
    if shuffled.len() != ids.len() {
        return invalid("duplicate ids in split input");
    }
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = shuffled.len();
    let count = |r: f64| ((n as f64 * r) + 1e-9).floor() as usize;
    let (n_val, n_test) = (count(ratios.val), count(ratios.test));
    let n_train = n - n_val - n_test;
    let test = shuffled.split_off(n_train + n_val);
    let val = shuffled.split_off(n_train);
    Ok(DatasetSplit { train: shuffled, val, test, seed })
}

/// The images whose ids are in `ids`, in the order of `ids`.
pub fn select<'a>(images: &'a [AnnotatedImage], ids: &[String]) -> Result<Vec<&'a AnnotatedImage>> {
    let index: std::collections::HashMap<&str, &AnnotatedImage> =
        images.iter().map(|a| (a.id.as_str(), a)).collect();
    ids.iter()
        .map(|id| index.get(id.as_str()).copied().ok_or_else(|| crate::CoreError::Invalid(format!("unknown image id `{id}`"))))
        .collect()
}
