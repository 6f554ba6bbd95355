//! Config-driven experiment runner. Stages run in a fixed order and write
//! under one output directory; `run.json` records each stage's key and the
//! digests of its outputs. A stage is skipped when its key is unchanged, its
//! outputs are present and nothing it depends on ran again.

mod config;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use diffyolo_nn::write_atomic;
use log::info;
use serde::{Deserialize, Serialize};
use serde_json::json;
use walkdir::WalkDir;

pub use config::{
    validate_config, ConfigErrors, ConfigIssue, DatasetConfig, DatasetKind, DdpmSection, EvalSection, ExperimentConfig,
};

use crate::data::{generate_synthetic, load_deeppcb, select, split, AnnotatedImage, DatasetSplit, CLASS_NAMES};
use crate::ddpm::{load_checkpoint, save_checkpoint, train_denoiser, DdpmCheckpoint};
use crate::detector::{load_detector, save_detector, train_detector, DetectorCheckpoint, DetectorMode};
use crate::error::{invalid, CoreError, Result};
use crate::eval::{evaluate_detections, render_report, EvalReport, RenderedReport};
use crate::features::{build_cache, FeatureCache, FeatureSource};
use crate::hashing::{canonical_hash, combine, sha256_hex};
use crate::noise::{corrupt, CorruptionSpec};

pub const RUN_MANIFEST: &str = "run.json";
pub const RUN_MANIFEST_VERSION: u32 = 1;

/// Stage names in execution order.
pub const STAGES: [&str; 7] = ["data", "ddpm", "features", "baseline", "diffyolo", "eval", "report"];

pub const IMAGES_DIR: &str = "data/images";
pub const SPLIT_FILE: &str = "data/split.json";
pub const DDPM_CKPT: &str = "ddpm/ddpm.ckpt";
pub const DDPM_HISTORY: &str = "ddpm/history.json";
pub const FEATURES_DIR: &str = "features";
pub const BASELINE_CKPT: &str = "baseline/detector.ckpt";
pub const BASELINE_HISTORY: &str = "baseline/history.json";
pub const DIFFYOLO_CKPT: &str = "diffyolo/detector.ckpt";
pub const DIFFYOLO_HISTORY: &str = "diffyolo/history.json";
pub const EVAL_DIR: &str = "eval";
pub const REPORT_TEXT: &str = "report/comparison.txt";
pub const REPORT_CSV: &str = "report/comparison.csv";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub key: String,
    /// Output path relative to the run directory, mapped to its digest.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub config_hash: String,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    pub fn read(dir: &Path) -> Result<Option<Self>> {
        match fs::read_to_string(dir.join(RUN_MANIFEST)) {
            Ok(text) => Ok(Some(serde_json::from_str(&text)?)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub executed: Vec<String>,
    pub skipped: Vec<String>,
    pub reports: Vec<EvalReport>,
    pub comparison: RenderedReport,
}

/// SHA-256 of a file, or for a directory a digest over the sorted relative
/// paths and contents of every file beneath it.
pub fn digest_path(path: &Path) -> Result<String> {
    if path.is_file() {
        return Ok(sha256_hex(&fs::read(path)?));
    }
    if !path.is_dir() {
        return invalid(format!("{} does not exist", path.display()));
    }
    let mut parts = Vec::new();
    for entry in WalkDir::new(path).sort_by_file_name() {
        let entry = entry.map_err(|e| CoreError::Io(e.into()))?;
        if entry.file_type().is_file() {
            let rel = entry.path().strip_prefix(path).unwrap_or(entry.path()).to_string_lossy().replace('\\', "/");
            parts.push((rel, sha256_hex(&fs::read(entry.path())?)));
        }
    }
    Ok(combine(&parts.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect::<Vec<_>>()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, (serde_json::to_string_pretty(value)? + "\n").as_bytes())?;
    Ok(())
}

/// Reads the exported dataset and its split back from a run directory.
pub fn load_run_data(dir: &Path, channels: usize) -> Result<(Vec<AnnotatedImage>, DatasetSplit)> {
    let images = load_deeppcb(&dir.join(IMAGES_DIR), channels)?;
    let split: DatasetSplit = serde_json::from_str(&fs::read_to_string(dir.join(SPLIT_FILE))?)?;
    Ok((images, split))
}

/// The images of one split part, in split order.
pub fn part(images: &[AnnotatedImage], split: &DatasetSplit, name: &str) -> Result<Vec<AnnotatedImage>> {
    Ok(select(images, split.part(name)?)?.into_iter().cloned().collect())
}

/// Materialises the configured dataset at the experiment's image size.
pub fn build_dataset(cfg: &ExperimentConfig) -> Result<Vec<AnnotatedImage>> {
    let raw = match cfg.dataset.source {
        DatasetKind::Synthetic => generate_synthetic(&cfg.dataset.synthetic, cfg.stage_seed("dataset"))?,
        DatasetKind::Deeppcb => {
            let Some(root) = &cfg.dataset.deeppcb_root else {
                return invalid("dataset.deeppcb_root is required for deeppcb");
            };
            load_deeppcb(root, cfg.dataset.channels)?
        }
    };
    if raw.is_empty() {
        return invalid("the dataset is empty");
    }
    raw.iter()
        .map(|item| {
            let r = item.resized(cfg.image_size)?;
            r.validate()?;
            Ok(r)
        })
        .collect()
}

/// The configured train/val/test split of `images`.
pub fn split_dataset(cfg: &ExperimentConfig, images: &[AnnotatedImage]) -> Result<DatasetSplit> {
    let ids: Vec<String> = images.iter().map(|i| i.id.clone()).collect();
    split(&ids, cfg.split, cfg.stage_seed("split"))
}

/// Evaluates a checkpoint on `images` after applying `spec` per image.
/// DiffYOLO checkpoints extract their features from the corrupted images.
pub fn evaluate_checkpoint(
    ckpt: &DetectorCheckpoint,
    images: &[AnnotatedImage],
    spec: &CorruptionSpec,
    ddpm: Option<&DdpmCheckpoint>,
    eval: &EvalSection,
) -> Result<EvalReport> {
    let corrupted = images
        .iter()
        .map(|d| Ok(AnnotatedImage { id: d.id.clone(), image: corrupt(&d.image, &spec.for_image(&d.id))?, boxes: d.boxes.clone() }))
        .collect::<Result<Vec<_>>>()?;
    let source = match (&ckpt.features, ddpm) {
        (Some(b), Some(ddpm)) => Some(FeatureSource::OnTheFly { ddpm, cfg: &b.extraction }),
        (Some(_), None) => return invalid("a diffyolo checkpoint needs the diffusion checkpoint to evaluate"),
        (None, _) => None,
    };
    let preds = ckpt.predict(&corrupted, source.as_ref(), &eval.decode)?;
    let truth: Vec<_> = corrupted.iter().map(|d| d.boxes.clone()).collect();
    evaluate_detections(spec.name(), ckpt.mode.name(), &CLASS_NAMES, &preds, &truth, &eval.metrics)
}

pub fn eval_file(condition: &str, model: &str) -> String {
    format!("{EVAL_DIR}/{condition}_{model}.json")
}

struct Run {
    dir: PathBuf,
    previous: Option<RunManifest>,
    manifest: RunManifest,
    executed: HashSet<String>,
    skipped: Vec<String>,
}

impl Run {
    fn record(&self, name: &str) -> Result<&StageRecord> {
        self.manifest.stage(name).ok_or_else(|| CoreError::Invalid(format!("stage `{name}` has not run")))
    }

    /// Checks that every output of `dep` still has its recorded digest.
    fn verify(&self, dep: &str) -> Result<()> {
        for (path, digest) in &self.record(dep)?.outputs {
            let now = digest_path(&self.dir.join(path)).ok();
            if now.as_deref() != Some(digest.as_str()) {
                return Err(CoreError::Provenance(format!(
                    "`{path}` from stage `{dep}` changed since it was recorded; delete it to rebuild"
                )));
            }
        }
        Ok(())
    }

    fn stage<S: Serialize>(
        &mut self,
        name: &str,
        deps: &[&str],
        section: &S,
        outputs: &[String],
        body: impl FnOnce(&Path) -> Result<()>,
    ) -> Result<()> {
        let wrap = |e: CoreError| CoreError::Stage { stage: name.to_string(), source: Box::new(e) };
        let mut parts = vec![("stage".to_string(), name.to_string()), ("section".into(), canonical_hash(section)?)];
        for dep in deps {
            self.verify(dep).map_err(wrap)?;
            for (path, digest) in &self.record(dep)?.outputs {
                parts.push((format!("{dep}:{path}"), digest.clone()));
            }
        }
        let key = combine(&parts.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect::<Vec<_>>());
        let reusable = self.previous.as_ref().and_then(|m| m.stage(name)).filter(|r| {
            r.key == key
                && outputs.iter().all(|o| r.outputs.contains_key(o) && self.dir.join(o).exists())
                && !deps.iter().any(|d| self.executed.contains(*d))
        });
        if let Some(r) = reusable.cloned() {
            info!("stage {name}: up to date");
            self.skipped.push(name.to_string());
            self.manifest.stages.push(r);
            return Ok(());
        }
        info!("stage {name}: running");
        for o in outputs {
            let p = self.dir.join(o);
            if p.is_dir() {
                fs::remove_dir_all(&p).map_err(|e| wrap(e.into()))?;
            }
        }
        body(&self.dir).map_err(wrap)?;
        let mut digests = BTreeMap::new();
        for o in outputs {
            digests.insert(o.clone(), digest_path(&self.dir.join(o)).map_err(wrap)?);
        }
        self.manifest.stages.push(StageRecord { name: name.to_string(), key, outputs: digests });
        self.executed.insert(name.to_string());
        self.save()
    }

    /// Writes the manifest: the stages of this run followed by any later
    /// stages of the previous run, so an interrupted run loses nothing.
    fn save(&self) -> Result<()> {
        let mut m = self.manifest.clone();
        if let Some(prev) = &self.previous {
            for s in &prev.stages {
                if m.stage(&s.name).is_none() {
                    m.stages.push(s.clone());
                }
            }
        }
        write_json(&self.dir.join(RUN_MANIFEST), &m)
    }
}

/// Runs every stage of the experiment under `cfg.output_dir`.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<RunSummary> {
    let raw = serde_json::to_value(cfg)?;
    let cfg = &validate_config(&raw)?;
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir)?;
    let previous = RunManifest::read(&dir).ok().flatten().filter(|m| m.version == RUN_MANIFEST_VERSION);
    let mut run = Run {
        dir: dir.clone(),
        previous,
        manifest: RunManifest { version: RUN_MANIFEST_VERSION, config_hash: cfg.hash(), stages: Vec::new() },
        executed: HashSet::new(),
        skipped: Vec::new(),
    };
    let seed = cfg.seed;
    let config_hash = cfg.hash();
    let channels = cfg.dataset.channels;
    write_atomic(&dir.join("config.json"), cfg.to_json()?.as_bytes())?;

    let data_section = json!({ "seed": seed, "size": cfg.image_size, "dataset": cfg.dataset, "split": cfg.split });
    run.stage("data", &[], &data_section, &[IMAGES_DIR.into(), SPLIT_FILE.into()], |d| {
        let images = build_dataset(cfg)?;
        crate::data::export_dataset(&images, &d.join(IMAGES_DIR))?;
        write_json(&d.join(SPLIT_FILE), &split_dataset(cfg, &images)?)
    })?;

    let train_images = |d: &Path| -> Result<Vec<AnnotatedImage>> {
        let (images, s) = load_run_data(d, channels)?;
        part(&images, &s, "train")
    };

    let ddpm_section = json!({ "seed": seed, "ddpm": cfg.ddpm });
    run.stage("ddpm", &["data"], &ddpm_section, &[DDPM_CKPT.into(), DDPM_HISTORY.into()], |d| {
        let train = train_images(d)?;
        let images: Vec<_> = train.iter().map(|i| i.image.clone()).collect();
        let schedule = cfg.ddpm.schedule.build()?;
        let (params, history) = train_denoiser(&images, &schedule, &cfg.ddpm.unet, &cfg.ddpm.train, cfg.stage_seed("ddpm"))?;
        save_checkpoint(&d.join(DDPM_CKPT), &cfg.ddpm.unet, &cfg.ddpm.schedule, &params, json!({ "train": cfg.ddpm.train }))?;
        write_json(&d.join(DDPM_HISTORY), &history)
    })?;

    run.stage("features", &["data", "ddpm"], &cfg.extraction, &[FEATURES_DIR.into()], |d| {
        let ddpm = load_checkpoint(&d.join(DDPM_CKPT))?;
        let report = build_cache(&train_images(d)?, &ddpm, &cfg.extraction, &d.join(FEATURES_DIR))?;
        match report.failed.first() {
            Some((id, e)) => invalid(format!("{} images failed feature extraction, first `{id}`: {e}", report.failed.len())),
            None => Ok(()),
        }
    })?;

    let base_section = json!({ "seed": seed, "detector": cfg.detector_for(false), "policy": cfg.baseline });
    run.stage("baseline", &["data"], &base_section, &[BASELINE_CKPT.into(), BASELINE_HISTORY.into()], |d| {
        let det = cfg.detector_for(false);
        let (ckpt, history) =
            train_detector(&train_images(d)?, DetectorMode::Baseline, &det, None, None, &cfg.baseline, cfg.stage_seed("baseline"))?;
        save_detector(&d.join(BASELINE_CKPT), &ckpt, json!({ "policy": cfg.baseline }))?;
        write_json(&d.join(BASELINE_HISTORY), &history)
    })?;

    let diff_section = json!({ "seed": seed, "detector": cfg.detector_for(true), "policy": cfg.diffyolo });
    run.stage(
        "diffyolo",
        &["data", "ddpm", "features", "baseline"],
        &diff_section,
        &[DIFFYOLO_CKPT.into(), DIFFYOLO_HISTORY.into()],
        |d| {
            let ddpm = load_checkpoint(&d.join(DDPM_CKPT))?;
            // refuses to train on features from any other diffusion checkpoint
            let cache = FeatureCache::open(&d.join(FEATURES_DIR), &ddpm.hash, &cfg.extraction)?;
            let base = load_detector(&d.join(BASELINE_CKPT))?;
            let det = cfg.detector_for(true);
            let source = FeatureSource::Cached(&cache);
            let (ckpt, history) = train_detector(
                &train_images(d)?,
                DetectorMode::Diffyolo,
                &det,
                Some(&base),
                Some(&source),
                &cfg.diffyolo,
                cfg.stage_seed("diffyolo"),
            )?;
            save_detector(&d.join(DIFFYOLO_CKPT), &ckpt, json!({ "policy": cfg.diffyolo }))?;
            write_json(&d.join(DIFFYOLO_HISTORY), &history)
        },
    )?;

    let eval_section = json!({ "corruptions": cfg.corruptions, "eval": cfg.eval, "config_hash": config_hash });
    run.stage("eval", &["data", "ddpm", "baseline", "diffyolo"], &eval_section, &[EVAL_DIR.into()], |d| {
        let (images, s) = load_run_data(d, channels)?;
        let test = part(&images, &s, &cfg.eval.split)?;
        let ddpm = load_checkpoint(&d.join(DDPM_CKPT))?;
        let models = [load_detector(&d.join(BASELINE_CKPT))?, load_detector(&d.join(DIFFYOLO_CKPT))?];
        for spec in &cfg.corruptions {
            for m in &models {
                let report = evaluate_checkpoint(m, &test, spec, Some(&ddpm), &cfg.eval)?.with_config_hash(&config_hash);
                info!("{} on {}: mAP@0.5 {:.4}", m.mode, spec.name(), report.map50());
                write_atomic(&d.join(eval_file(spec.name(), m.mode.name())), report.to_json()?.as_bytes())?;
            }
        }
        Ok(())
    })?;

    let read_reports = |d: &Path, model: &str| -> Result<Vec<EvalReport>> {
        cfg.corruptions.iter().map(|s| EvalReport::from_json(&fs::read_to_string(d.join(eval_file(s.name(), model)))?)).collect()
    };
    run.stage("report", &["eval"], &json!({}), &[REPORT_TEXT.into(), REPORT_CSV.into()], |d| {
        let r = render_report(&read_reports(d, "baseline")?, &read_reports(d, "diffyolo")?)?;
        write_atomic(&d.join(REPORT_TEXT), r.text.as_bytes())?;
        write_atomic(&d.join(REPORT_CSV), r.csv.as_bytes())?;
        Ok(())
    })?;
    run.save()?;

    let baseline = read_reports(&dir, "baseline")?;
    let diffyolo = read_reports(&dir, "diffyolo")?;
    let comparison = RenderedReport { text: fs::read_to_string(dir.join(REPORT_TEXT))?, csv: fs::read_to_string(dir.join(REPORT_CSV))? };
    let executed = STAGES.iter().filter(|s| run.executed.contains(**s)).map(|s| s.to_string()).collect();
    Ok(RunSummary {
        dir,
        manifest: run.manifest,
        executed,
        skipped: run.skipped,
        reports: baseline.into_iter().chain(diffyolo).collect(),
        comparison,
    })
}
