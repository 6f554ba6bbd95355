//! `diffyolo`: train, cache, corrupt, evaluate and compare from the shell.
//!
//! Exit codes: 0 success, 1 invalid arguments or config, 2 a stage failed.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use diffyolo_core::data::{export_dataset, load_deeppcb, AnnotatedImage};
use diffyolo_core::ddpm::{load_checkpoint, save_checkpoint, train_denoiser, DdpmCheckpoint};
use diffyolo_core::detector::{load_detector, save_detector, train_detector, DetectorMode};
use diffyolo_core::eval::{render_report, EvalReport};
use diffyolo_core::features::{build_cache, CacheManifest, FeatureCache, FeatureSource};
use diffyolo_core::noise::{corrupt, Corruption, CorruptionSpec};
use diffyolo_core::pipeline::{
    build_dataset, evaluate_checkpoint, part, run_pipeline, split_dataset, validate_config, ExperimentConfig,
};
use diffyolo_core::CoreError;
use log::info;
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "diffyolo", version, about = "Diffusion-feature injection for noise-robust defect detection")]
struct Cli {
    /// Experiment config (JSON); defaults apply to missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed (for noise-gen: the corruption seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Baseline,
    Diffyolo,
}

#[derive(Clone, Copy, ValueEnum)]
enum NoiseKind {
    None,
    Gaussian,
    SaltPepper,
    Poisson,
}

#[derive(Subcommand)]
enum Command {
    /// Train the diffusion model on the training split (or on every image in --data).
    DdpmTrain {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract and store diffusion features for a dataset directory.
    FeatureCache {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ddpm: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a baseline detector, or fine-tune DiffYOLO from a baseline.
    DetectTrain {
        #[arg(long, value_enum)]
        mode: Mode,
        /// Baseline checkpoint to start from (diffyolo).
        #[arg(long)]
        init: Option<PathBuf>,
        /// Feature cache manifest or directory (diffyolo).
        #[arg(long)]
        features: Option<PathBuf>,
        /// Diffusion checkpoint the features must come from; defaults to the one the manifest names.
        #[arg(long)]
        ddpm: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a corrupted copy of a dataset directory.
    NoiseGen {
        #[arg(long, value_enum)]
        kind: NoiseKind,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        amount: Option<f64>,
        #[arg(long)]
        salt_fraction: Option<f64>,
        #[arg(long)]
        peak: Option<f64>,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a detector checkpoint under one corruption.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// e.g. `none`, `gaussian:sigma=0.1,seed=3`
        #[arg(long, default_value = "none")]
        noise: String,
        /// Evaluate every image of this directory instead of a config split.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Needed for diffyolo checkpoints.
        #[arg(long)]
        ddpm: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare baseline and DiffYOLO reports condition by condition.
    Report {
        /// A baseline report followed by its DiffYOLO counterpart; repeatable.
        #[arg(long, num_args = 2, value_names = ["BASE", "DIFF"], required = true)]
        pair: Vec<PathBuf>,
        /// Directory for comparison.txt and comparison.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the whole experiment.
    Run {
        /// Overrides the config output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Stage(CoreError),
}

impl From<CoreError> for Failure {
    fn from(e: CoreError) -> Self {
        Failure::Stage(e)
    }
}

type Outcome<T> = Result<T, Failure>;

fn usage<T>(msg: impl Into<String>) -> Outcome<T> {
    Err(Failure::Usage(msg.into()))
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Outcome<ExperimentConfig> {
    let mut raw = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
            serde_json::from_str::<Value>(&text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?
        }
        None => json!({}),
    };
    if let Some(s) = seed {
        match raw.as_object_mut() {
            Some(obj) => {
                obj.insert("seed".into(), json!(s));
            }
            None => return usage("config must be a JSON object"),
        }
    }
    validate_config(&raw).map_err(|e| Failure::Usage(format!("invalid config:\n{e}")))
}

fn load_dir(dir: &Path, cfg: &ExperimentConfig) -> Outcome<Vec<AnnotatedImage>> {
    let images = load_deeppcb(dir, cfg.dataset.channels)?;
    if images.is_empty() {
        return usage(format!("no annotated images under {}", dir.display()));
    }
    Ok(images.iter().map(|i| i.resized(cfg.image_size)).collect::<Result<_, _>>()?)
}

/// `--data` if given, else the config dataset's `name` split.
fn images_for(data: Option<&Path>, cfg: &ExperimentConfig, name: &str) -> Outcome<Vec<AnnotatedImage>> {
    match data {
        Some(d) => load_dir(d, cfg),
        None => {
            let images = build_dataset(cfg)?;
            let s = split_dataset(cfg, &images)?;
            Ok(part(&images, &s, name)?)
        }
    }
}

fn manifest_dir(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.to_path_buf()
    } else {
        p.parent().map(Path::to_path_buf).unwrap_or_default()
    }
}

fn noise_spec(kind: NoiseKind, sigma: Option<f64>, amount: Option<f64>, frac: Option<f64>, peak: Option<f64>, seed: u64) -> Outcome<CorruptionSpec> {
    let stray = |name: &str, v: Option<f64>| if v.is_some() { usage(format!("--{name} does not apply to this noise kind")) } else { Ok(()) };
    let c = match kind {
        NoiseKind::None => {
            for (n, v) in [("sigma", sigma), ("amount", amount), ("salt-fraction", frac), ("peak", peak)] {
                stray(n, v)?;
            }
            Corruption::None
        }
        NoiseKind::Gaussian => {
            for (n, v) in [("amount", amount), ("salt-fraction", frac), ("peak", peak)] {
                stray(n, v)?;
            }
            Corruption::Gaussian { sigma: sigma.unwrap_or(Corruption::DEFAULT_SIGMA) }
        }
        NoiseKind::SaltPepper => {
            for (n, v) in [("sigma", sigma), ("peak", peak)] {
                stray(n, v)?;
            }
            Corruption::SaltPepper {
                amount: amount.unwrap_or(Corruption::DEFAULT_AMOUNT),
                salt_fraction: frac.unwrap_or(Corruption::DEFAULT_SALT_FRACTION),
            }
        }
        NoiseKind::Poisson => {
            for (n, v) in [("sigma", sigma), ("amount", amount), ("salt-fraction", frac)] {
                stray(n, v)?;
            }
            Corruption::Poisson { peak: peak.unwrap_or(Corruption::DEFAULT_PEAK) }
        }
    };
    c.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(CorruptionSpec::new(c, seed))
}

fn run(cli: Cli) -> Outcome<()> {
    let cfg_path = cli.config.as_deref();
    match cli.command {
        Command::DdpmTrain { data, out } => {
            let cfg = load_config(cfg_path, cli.seed)?;
            let train = images_for(data.as_deref(), &cfg, "train")?;
            let images: Vec<_> = train.into_iter().map(|i| i.image).collect();
            let schedule = cfg.ddpm.schedule.build()?;
            let seed = cfg.stage_seed("ddpm");
            let (params, history) = train_denoiser(&images, &schedule, &cfg.ddpm.unet, &cfg.ddpm.train, seed)?;
            let hash = save_checkpoint(&out, &cfg.ddpm.unet, &cfg.ddpm.schedule, &params, json!({ "train": cfg.ddpm.train }))?;
            println!("{} (val loss {:.4}, sha256 {hash})", out.display(), history.val_losses.last().copied().unwrap_or(f64::NAN));
        }
        Command::FeatureCache { data, ddpm, out } => {
            let cfg = load_config(cfg_path, cli.seed)?;
            let images = load_dir(&data, &cfg)?;
            let ddpm = load_checkpoint(&ddpm)?;
            let report = build_cache(&images, &ddpm, &cfg.extraction, &out)?;
            println!(
                "{}: {} extracted, {} reused, {} failed",
                report.manifest_path.display(),
                report.extracted,
                report.skipped,
                report.failed.len()
            );
            if let Some((id, e)) = report.failed.first() {
                return Err(Failure::Stage(CoreError::Invalid(format!("feature extraction failed for `{id}`: {e}"))));
            }
        }
        Command::DetectTrain { mode, init, features, ddpm, data, out } => {
            let cfg = load_config(cfg_path, cli.seed)?;
            let train = images_for(data.as_deref(), &cfg, "train")?;
            let (ckpt, history) = match mode {
                Mode::Baseline => {
                    if init.is_some() || features.is_some() {
                        return usage("baseline training takes no --init or --features");
                    }
                    let seed = cfg.stage_seed("baseline");
                    train_detector(&train, DetectorMode::Baseline, &cfg.detector_for(false), None, None, &cfg.baseline, seed)?
                }
                Mode::Diffyolo => {
                    let (Some(init), Some(features)) = (init, features) else {
                        return usage("diffyolo training needs --init <baseline ckpt> and --features <manifest>");
                    };
                    let dir = manifest_dir(&features);
                    let expected = match &ddpm {
                        Some(p) => load_checkpoint(p)?.hash,
                        None => CacheManifest::read(&dir)?.ddpm_checkpoint_hash,
                    };
                    let cache = FeatureCache::open(&dir, &expected, &cfg.extraction)?;
                    let base = load_detector(&init)?;
                    let seed = cfg.stage_seed("diffyolo");
                    let source = FeatureSource::Cached(&cache);
                    train_detector(&train, DetectorMode::Diffyolo, &cfg.detector_for(true), Some(&base), Some(&source), &cfg.diffyolo, seed)?
                }
            };
            let policy = if ckpt.mode == DetectorMode::Baseline { &cfg.baseline } else { &cfg.diffyolo };
            let hash = save_detector(&out, &ckpt, json!({ "policy": policy }))?;
            let last = history.epoch_loss.last().copied().unwrap_or(f64::NAN);
            println!("{} ({} mode, final epoch loss {last:.4}, sha256 {hash})", out.display(), ckpt.mode);
        }
        Command::NoiseGen { kind, sigma, amount, salt_fraction, peak, input, out } => {
            let spec = noise_spec(kind, sigma, amount, salt_fraction, peak, cli.seed.unwrap_or(0))?;
            let channels = match cfg_path {
                Some(_) => load_config(cfg_path, None)?.dataset.channels,
                None => 1,
            };
            let images = load_deeppcb(&input, channels)?;
            if images.is_empty() {
                return usage(format!("no annotated images under {}", input.display()));
            }
            let noisy = images
                .iter()
                .map(|d| Ok(AnnotatedImage { id: d.id.clone(), image: corrupt(&d.image, &spec.for_image(&d.id))?, boxes: d.boxes.clone() }))
                .collect::<Result<Vec<_>, CoreError>>()?;
            export_dataset(&noisy, &out)?;
            println!("{} images -> {} ({spec})", noisy.len(), out.display());
        }
        Command::Evaluate { ckpt, split: name, noise, data, ddpm, out } => {
            let cfg = load_config(cfg_path, cli.seed)?;
            let spec: CorruptionSpec = noise.parse().map_err(|e: CoreError| Failure::Usage(e.to_string()))?;
            if !matches!(name.as_str(), "train" | "val" | "test") {
                return usage(format!("--split `{name}` is not train, val or test"));
            }
            let model = load_detector(&ckpt)?;
            let ddpm: Option<DdpmCheckpoint> = ddpm.as_deref().map(load_checkpoint).transpose()?;
            if model.mode == DetectorMode::Diffyolo && ddpm.is_none() {
                return usage("diffyolo checkpoints need --ddpm to extract features");
            }
            let images = images_for(data.as_deref(), &cfg, &name)?;
            let report = evaluate_checkpoint(&model, &images, &spec, ddpm.as_ref(), &cfg.eval)?.with_config_hash(cfg.hash());
            fs::write(&out, report.to_json()?).map_err(CoreError::from)?;
            println!("{} on {}: mAP@0.5 {:.4} -> {}", model.mode, spec.name(), report.map50(), out.display());
        }
        Command::Report { pair, out } => {
            let read = |p: &PathBuf| -> Outcome<EvalReport> {
                let text = fs::read_to_string(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
                EvalReport::from_json(&text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))
            };
            let mut base = Vec::new();
            let mut diff = Vec::new();
            for two in pair.chunks(2) {
                base.push(read(&two[0])?);
                diff.push(read(&two[1])?);
            }
            let r = render_report(&base, &diff).map_err(|e| Failure::Usage(e.to_string()))?;
            print!("{}", r.text);
            if let Some(dir) = out {
                fs::create_dir_all(&dir).map_err(CoreError::from)?;
                fs::write(dir.join("comparison.txt"), &r.text).map_err(CoreError::from)?;
                fs::write(dir.join("comparison.csv"), &r.csv).map_err(CoreError::from)?;
            }
        }
        Command::Run { out } => {
            let mut cfg = load_config(cfg_path, cli.seed)?;
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            let summary = run_pipeline(&cfg)?;
            info!("executed {:?}, skipped {:?}", summary.executed, summary.skipped);
            print!("{}", summary.comparison.text);
            println!("results in {}", summary.dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Stage(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
