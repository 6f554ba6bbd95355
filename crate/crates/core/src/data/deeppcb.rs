use std::fs;
use std::path::{Path, PathBuf};

use walkdir::WalkDir;

use super::{AnnotatedImage, BBox, GroundTruthBox, NUM_CLASSES};
use crate::error::{CoreError, Result};
use crate::image::{ImageTensor, ValueRange};

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

/// Loads every annotated image under `root`, sorted by id.
///
/// Images are found recursively. For an image `<dir>/<key>_test.jpg` (or
/// `<dir>/<key>.png`) the annotation is `<dir>/<key>.txt` or, as in the
/// DeepPCB release, `<dir>_not/<key>.txt`. Template images (`*_temp.*`) are
/// skipped, as are images without an annotation file.
pub fn load_deeppcb(root: &Path, channels: usize) -> Result<Vec<AnnotatedImage>> {
    if channels != 1 && channels != 3 {
        return Err(CoreError::Invalid(format!("channels must be 1 or 3, got {channels}")));
    }
    if !root.is_dir() {
        return Err(CoreError::Invalid(format!("dataset root {} is not a directory", root.display())));
    }
    let mut out = Vec::new();
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| CoreError::Io(e.into()))?;
        let path = entry.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if !entry.file_type().is_file() || !is_image {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        if stem.ends_with("_temp") {
            continue;
        }
        let key = stem.strip_suffix("_test").unwrap_or(stem);
        let Some(ann) = annotation_path(path, key) else {
            log::warn!("no annotation for {}, skipping", path.display());
            continue;
        };
        let image = load_image(path, channels)?;
        let text = fs::read_to_string(&ann)?;
        let boxes = parse_annotations(&text, &ann, image.width(), image.height())?;
        let rel = path.parent().unwrap_or(root).strip_prefix(root).unwrap_or(Path::new(""));
        let id = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .chain(std::iter::once(key.to_string()))
            .collect::<Vec<_>>()
            .join("/");
        out.push(AnnotatedImage { id, image, boxes });
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

fn annotation_path(image: &Path, key: &str) -> Option<PathBuf> {
    let dir = image.parent()?;
    let same = dir.join(format!("{key}.txt"));
    if same.is_file() {
        return Some(same);
    }
    let name = dir.file_name()?.to_str()?;
    let sibling = dir.with_file_name(format!("{name}_not")).join(format!("{key}.txt"));
    sibling.is_file().then_some(sibling)
}

fn load_image(path: &Path, channels: usize) -> Result<ImageTensor> {
    let img = ::image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = if channels == 1 {
        img.to_luma8().into_raw().into_iter().map(|v| v as f32 / 255.0).collect()
    } else {
        let rgb = img.to_rgb8().into_raw();
        (0..3).flat_map(|ch| rgb.iter().skip(ch).step_by(3).map(|&v| v as f32 / 255.0).collect::<Vec<_>>()).collect()
    };
    ImageTensor::new(channels, h, w, data, ValueRange::Unit)
}

/// Parses `x1 y1 x2 y2 class` lines (spaces or commas), classes 1-indexed.
/// Boxes are clipped to the image; blank lines and `#` comments are ignored.
pub fn parse_annotations(text: &str, path: &Path, width: usize, height: usize) -> Result<Vec<GroundTruthBox>> {
    let err = |line: usize, msg: String| CoreError::Annotation { path: path.to_path_buf(), line, msg };
    let mut boxes = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(|c: char| c == ',' || c.is_whitespace()).filter(|f| !f.is_empty()).collect();
        if fields.len() != 5 {
            return Err(err(line, format!("expected `x1 y1 x2 y2 class`, got `{trimmed}`")));
        }
        let mut coords = [0.0f64; 4];
        for (c, f) in coords.iter_mut().zip(&fields[..4]) {
            *c = f.parse().ok().filter(|v: &f64| v.is_finite()).ok_or_else(|| err(line, format!("bad coordinate `{f}`")))?;
        }
        let class: usize = fields[4].parse().map_err(|_| err(line, format!("bad class `{}`", fields[4])))?;
        if !(1..=NUM_CLASSES).contains(&class) {
            return Err(err(line, format!("class {class} outside 1..={NUM_CLASSES}")));
        }
        let bbox = BBox::new(coords[0], coords[1], coords[2], coords[3]);
        if !bbox.is_valid() {
            return Err(err(line, format!("inverted or empty box `{trimmed}`")));
        }
        let clipped = bbox.clip(width as f64, height as f64);
        if !clipped.is_valid() {
            return Err(err(line, format!("box `{trimmed}` lies outside the {width}x{height} image")));
        }
        boxes.push(GroundTruthBox { bbox: clipped, class: class - 1 });
    }
    Ok(boxes)
}
