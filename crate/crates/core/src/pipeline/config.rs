use std::fmt;
use std::path::PathBuf;

use diffyolo_nn::derive_seed;
use serde::{Deserialize, Serialize};

use crate::data::{SplitRatios, SyntheticConfig, NUM_CLASSES};
use crate::ddpm::{DdpmTrainConfig, ScheduleConfig, UNetConfig};
use crate::detector::{DecodeConfig, DetectorConfig, TrainPolicy, Trainable, STRIDES};
use crate::error::{CoreError, Result};
use crate::eval::EvalConfig;
use crate::features::ExtractionConfig;
use crate::hashing::canonical_hash;
use crate::noise::{Corruption, CorruptionSpec};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    #[default]
    Synthetic,
    Deeppcb,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DatasetKind,
    pub synthetic: SyntheticConfig,
    /// Root of a DeepPCB-style tree; required when `source` is `deeppcb`.
    pub deeppcb_root: Option<PathBuf>,
    /// 1 for grayscale, 3 for RGB.
    pub channels: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { source: DatasetKind::Synthetic, synthetic: SyntheticConfig::default(), deeppcb_root: None, channels: 1 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DdpmSection {
    pub unet: UNetConfig,
    pub schedule: ScheduleConfig,
    pub train: DdpmTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Split the corruption sweep is evaluated on.
    pub split: String,
    pub metrics: EvalConfig,
    pub decode: DecodeConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { split: "test".into(), metrics: EvalConfig::default(), decode: DecodeConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Not part of the config hash, so runs in different places compare equal.
    pub output_dir: PathBuf,
    /// Side every image is resized to before training and evaluation.
    pub image_size: usize,
    pub dataset: DatasetConfig,
    pub split: SplitRatios,
    pub ddpm: DdpmSection,
    pub extraction: ExtractionConfig,
    /// Shared by both models; `injection.enabled` is set per model.
    pub detector: DetectorConfig,
    pub baseline: TrainPolicy,
    pub diffyolo: TrainPolicy,
    pub corruptions: Vec<CorruptionSpec>,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            image_size: 64,
            dataset: DatasetConfig::default(),
            split: SplitRatios::default(),
            ddpm: DdpmSection::default(),
            extraction: ExtractionConfig::default(),
            detector: DetectorConfig::default(),
            baseline: TrainPolicy { trainable: Trainable::All, ..TrainPolicy::default() },
            diffyolo: TrainPolicy { epochs: 40, lr: 2e-3, ..TrainPolicy::default() },
            corruptions: Corruption::standard_sweep().into_iter().map(|c| CorruptionSpec::new(c, 0)).collect(),
            eval: EvalSection::default(),
        }
    }
}

impl ExperimentConfig {
    /// Hash of the canonical serialisation without `output_dir`.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        canonical_hash(&c).expect("config serialises")
    }

    /// Seed of one stage's random stream.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        derive_seed(self.seed, stage)
    }

    /// Detector config for baseline (`false`) or DiffYOLO (`true`).
    pub fn detector_for(&self, injection: bool) -> DetectorConfig {
        let mut d = self.detector.clone();
        d.injection.enabled = injection;
        d
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// One problem with a config, located by JSON path.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigIssue {
    pub path: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigErrors(pub Vec<ConfigIssue>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{}: {}", e.path, e.message)?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

impl From<ConfigErrors> for CoreError {
    fn from(e: ConfigErrors) -> Self {
        CoreError::Invalid(e.to_string())
    }
}

struct Issues(Vec<ConfigIssue>);

impl Issues {
    fn push(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.0.push(ConfigIssue { path: path.into(), message: message.into() });
    }

    fn check(&mut self, path: &str, r: Result<()>) {
        if let Err(e) = r {
            let msg = match e {
                CoreError::Invalid(m) | CoreError::Shape(m) => m,
                other => other.to_string(),
            };
            self.push(path, msg);
        }
    }
}

/// Parses a raw JSON document, fills defaults and checks every cross-field
/// constraint. All problems are reported together.
pub fn validate_config(raw: &serde_json::Value) -> std::result::Result<ExperimentConfig, ConfigErrors> {
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(raw).map_err(|e| {
        let path = e.path().to_string();
        ConfigErrors(vec![ConfigIssue { path: if path == "." { "$".into() } else { path }, message: e.into_inner().to_string() }])
    })?;
    let mut is = Issues(Vec::new());
    let size = cfg.image_size;
    if size == 0 || !size.is_multiple_of(32) {
        is.push("image_size", format!("{size} is not a positive multiple of 32"));
    }
    match cfg.dataset.source {
        DatasetKind::Deeppcb if cfg.dataset.deeppcb_root.is_none() => {
            is.push("dataset.deeppcb_root", "required when dataset.source is deeppcb")
        }
        DatasetKind::Synthetic => {
            is.check("dataset.synthetic", cfg.dataset.synthetic.validate());
            if cfg.dataset.channels != 1 {
                is.push("dataset.channels", "synthetic images are grayscale; channels must be 1");
            }
        }
        _ => {}
    }
    if !matches!(cfg.dataset.channels, 1 | 3) {
        is.push("dataset.channels", format!("{} is not 1 or 3", cfg.dataset.channels));
    }
    is.check("split", cfg.split.validate());

    let unet = &cfg.ddpm.unet;
    is.check("ddpm.unet", unet.validate());
    if unet.image_size != size {
        is.push("ddpm.unet.image_size", format!("{} differs from image_size {size}", unet.image_size));
    }
    if unet.in_channels != cfg.dataset.channels {
        is.push("ddpm.unet.in_channels", format!("{} differs from dataset.channels {}", unet.in_channels, cfg.dataset.channels));
    }
    if cfg.ddpm.schedule.steps == 0 {
        is.push("ddpm.schedule.steps", "must be positive");
    }

    let ext = &cfg.extraction;
    if ext.tap_levels.is_empty() {
        is.push("extraction.tap_levels", "at least one tap level is required");
    }
    for (i, &l) in ext.tap_levels.iter().enumerate() {
        if l >= unet.levels() {
            is.push(
                format!("extraction.tap_levels[{i}]"),
                format!("level {l} does not exist in a {}-level U-Net (valid: 0..={})", unet.levels(), unet.levels().saturating_sub(1)),
            );
        } else if ext.tap_levels[..i].contains(&l) {
            is.push(format!("extraction.tap_levels[{i}]"), format!("level {l} listed twice"));
        }
    }
    if ext.timestep == 0 || ext.timestep > cfg.ddpm.schedule.steps {
        is.push("extraction.timestep", format!("{} outside 1..={}", ext.timestep, cfg.ddpm.schedule.steps));
    }

    let det = &cfg.detector;
    let stride = det.injection.stride;
    if !STRIDES.contains(&stride) {
        is.push("detector.injection.stride", format!("{stride} is not a produced stride; valid strides are {{8, 16, 32}}"));
    } else if ext.resolution * stride != size {
        is.push("extraction.resolution", format!("{} does not equal image_size / injection stride = {}", ext.resolution, size / stride));
    }
    if ext.fused_channels != det.injection.fused_channels {
        is.push(
            "detector.injection.fused_channels",
            format!("{} differs from extraction.fused_channels {}", det.injection.fused_channels, ext.fused_channels),
        );
    }
    if det.input_size != size {
        is.push("detector.input_size", format!("{} differs from image_size {size}", det.input_size));
    }
    if det.in_channels != cfg.dataset.channels {
        is.push("detector.in_channels", format!("{} differs from dataset.channels {}", det.in_channels, cfg.dataset.channels));
    }
    if det.num_classes != NUM_CLASSES {
        is.push("detector.num_classes", format!("{} but the dataset taxonomy has {NUM_CLASSES} classes", det.num_classes));
    }
    if det.objectness_prior <= 0.0 || det.objectness_prior >= 1.0 {
        is.push("detector.objectness_prior", "must lie in (0, 1)");
    }

    is.check("baseline", cfg.baseline.validate());
    is.check("diffyolo", cfg.diffyolo.validate());
    if cfg.diffyolo.trainable == Trainable::All {
        is.push("diffyolo.trainable", "the backbone stays frozen during fine-tuning; `all` is not allowed");
    }

    if cfg.corruptions.is_empty() {
        is.push("corruptions", "at least one condition is required");
    }
    for (i, c) in cfg.corruptions.iter().enumerate() {
        is.check(&format!("corruptions[{i}]"), c.corruption.validate());
        if cfg.corruptions[..i].iter().any(|o| o.name() == c.name()) {
            is.push(format!("corruptions[{i}]"), format!("condition `{}` listed twice", c.name()));
        }
    }
    if !matches!(cfg.eval.split.as_str(), "train" | "val" | "test") {
        is.push("eval.split", format!("`{}` is not train, val or test", cfg.eval.split));
    }
    let t = cfg.eval.metrics.conf_threshold;
    if !(t > 0.0 && t < 1.0) {
        is.push("eval.metrics.conf_threshold", format!("{t} outside (0, 1)"));
    }
    is.check("eval.decode", cfg.eval.decode.validate());

    if is.0.is_empty() {
        Ok(cfg)
    } else {
        Err(ConfigErrors(is.0))
    }
}
