use std::fmt;
use std::path::Path;

use diffyolo_nn::{derive_seed, Adam, AdamConfig, Container, Graph, ParamSet, Tensor, Var};
use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::augment::{Augment, Transform};
use super::decode::{decode_and_nms, DecodeConfig};
use super::loss::{detection_loss, LossComponents, LossWeights};
use super::model::{Detector, DetectorConfig, ParamGroup, RawPredictions};
use crate::data::{AnnotatedImage, GroundTruthBox};
use crate::error::{invalid, CoreError, Result};
use crate::eval::Detection;
use crate::features::{ExtractionConfig, FeatureSource, FeatureTaps, Fusion};
use crate::hashing::{canonical_hash, canonical_json};
use crate::image::ValueRange;
use crate::CHECKPOINT_MAGIC;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorMode {
    Baseline,
    Diffyolo,
}

impl DetectorMode {
    pub fn name(self) -> &'static str {
        match self {
            DetectorMode::Baseline => "baseline",
            DetectorMode::Diffyolo => "diffyolo",
        }
    }
}

impl fmt::Display for DetectorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for DetectorMode {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(DetectorMode::Baseline),
            "diffyolo" => Ok(DetectorMode::Diffyolo),
            other => invalid(format!("unknown detector mode `{other}`")),
        }
    }
}

/// Which parameter groups a fine-tune updates. The fusion projections are
/// always trained alongside the adapter.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trainable {
    AdapterOnly,
    #[default]
    AdapterHead,
    AdapterNeckHead,
    /// Everything; only valid for baseline training.
    All,
}

impl Trainable {
    pub fn includes(self, group: ParamGroup) -> bool {
        use ParamGroup::*;
        match self {
            Trainable::AdapterOnly => matches!(group, Adapter | Fusion),
            Trainable::AdapterHead => matches!(group, Adapter | Fusion | Head),
            Trainable::AdapterNeckHead => matches!(group, Adapter | Fusion | Head | Neck),
            Trainable::All => true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainPolicy {
    pub trainable: Trainable,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Linear warm-up length; the rate then follows a cosine to 5% of `lr`.
    pub warmup_steps: usize,
    pub loss: LossWeights,
    pub augment: Augment,
}

impl Default for TrainPolicy {
    fn default() -> Self {
        Self {
            trainable: Trainable::default(),
            epochs: 150,
            batch_size: 8,
            lr: 5e-3,
            weight_decay: 1e-4,
            warmup_steps: 50,
            loss: LossWeights::default(),
            augment: Augment::default(),
        }
    }
}

impl TrainPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return invalid("batch_size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.weight_decay < 0.0 {
            return invalid("learning rate must be positive and weight decay non-negative");
        }
        Ok(())
    }

    fn lr_at(&self, step: usize, total: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = total.saturating_sub(self.warmup_steps).max(1) as f64;
        let p = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let floor = 0.05 * self.lr;
        floor + (self.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
    }
}

/// The diffusion features a DiffYOLO checkpoint was trained with.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureBinding {
    pub ddpm_hash: String,
    pub extraction: ExtractionConfig,
    pub fusion: Fusion,
}

impl FeatureBinding {
    pub fn provenance_hash(&self) -> String {
        canonical_hash(&(&self.ddpm_hash, &self.extraction)).expect("serialisable")
    }

    /// Errors unless `source` produces the same features.
    pub fn check(&self, source: &FeatureSource) -> Result<()> {
        if source.ddpm_hash() != self.ddpm_hash {
            return Err(CoreError::Provenance(format!(
                "features come from diffusion checkpoint {}, detector was trained on {}",
                source.ddpm_hash(),
                self.ddpm_hash
            )));
        }
        if source.config() != &self.extraction {
            return Err(CoreError::Provenance("feature extraction config differs from training".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct DetectorCheckpoint {
    pub config: DetectorConfig,
    pub mode: DetectorMode,
    pub params: ParamSet,
    pub features: Option<FeatureBinding>,
    /// Checksum of the saved file; empty until saved or loaded.
    pub hash: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectorTrainHistory {
    pub steps: Vec<LossComponents>,
    pub epoch_loss: Vec<f64>,
}

impl DetectorTrainHistory {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.total).collect()
    }
}

struct Prepared {
    inputs: Vec<Tensor<f32>>,
    truth: Vec<Vec<GroundTruthBox>>,
}

fn prepare(cfg: &DetectorConfig, data: &[AnnotatedImage]) -> Result<Prepared> {
    let want = (cfg.in_channels, cfg.input_size, cfg.input_size);
    let mut inputs = Vec::with_capacity(data.len());
    for item in data {
        if item.image.shape() != want {
            return Err(CoreError::Shape(format!("image `{}` is {:?}, detector expects {want:?}", item.id, item.image.shape())));
        }
        inputs.push(item.image.to_range(ValueRange::Symmetric).into_tensor());
    }
    Ok(Prepared { inputs, truth: data.iter().map(|d| d.boxes.clone()).collect() })
}

fn load_taps(source: &FeatureSource, data: &[AnnotatedImage]) -> Result<Vec<FeatureTaps>> {
    data.iter().map(|d| source.taps(&d.id, &d.image)).collect()
}

/// Builds the fused map for a batch inside `g`.
fn fused_var(g: &mut Graph, b: &diffyolo_nn::Bindings, fusion: &Fusion, taps: &[&FeatureTaps]) -> Result<Var> {
    let vars: Vec<Var> = fusion.batch_taps::<f32>(taps)?.into_iter().map(|t| g.constant(t)).collect();
    fusion.forward(g, b, &vars)
}

/// Trains a detector.
///
/// Baseline mode trains every parameter from a fresh initialisation.
/// DiffYOLO mode starts from the baseline checkpoint `init`, adds a zero
/// adapter and fresh fusion projections, and updates only the groups
/// `policy.trainable` names; the backbone always stays frozen. Features
/// come from `features`, whose provenance is recorded in the checkpoint.
pub fn train_detector(
    data: &[AnnotatedImage],
    mode: DetectorMode,
    cfg: &DetectorConfig,
    init: Option<&DetectorCheckpoint>,
    features: Option<&FeatureSource>,
    policy: &TrainPolicy,
    seed: u64,
) -> Result<(DetectorCheckpoint, DetectorTrainHistory)> {
    policy.validate()?;
    let det = Detector::new(cfg)?;
    let prep = prepare(cfg, data)?;
    let (mut params, taps, binding) = match mode {
        DetectorMode::Baseline => {
            if cfg.injection.enabled || init.is_some() || features.is_some() {
                return invalid("baseline training takes no injection, initial checkpoint or features");
            }
            (det.init_params(derive_seed(seed, "detector-init")), None, None)
        }
        DetectorMode::Diffyolo => {
            let (Some(base), Some(source)) = (init, features) else {
                return invalid("diffyolo training needs a baseline checkpoint and a feature source");
            };
            if base.mode != DetectorMode::Baseline {
                return invalid("diffyolo training must start from a baseline checkpoint");
            }
            if !cfg.injection.enabled {
                return invalid("diffyolo training needs injection enabled");
            }
            let mut plain = cfg.clone();
            plain.injection = base.config.injection.clone();
            if plain != base.config {
                return invalid("detector config differs from the baseline checkpoint beyond injection");
            }
            if policy.trainable == Trainable::All {
                return invalid("diffyolo fine-tuning keeps the backbone frozen; `all` is not allowed");
            }
            let ext = source.config();
            let want = cfg.fused_shape();
            if ext.fused_channels != want[0] || ext.resolution != want[1] {
                return Err(CoreError::Shape(format!(
                    "features are {}×{r}×{r}, injection expects {want:?}",
                    ext.fused_channels,
                    r = ext.resolution
                )));
            }
            let taps = load_taps(source, data)?;
            let fusion = match taps.first() {
                Some(t) => Fusion::from_taps(t, ext.fused_channels),
                None => return invalid("diffyolo training needs at least one image"),
            };
            let mut params = base.params.clone();
            det.add_adapter(&mut params);
            fusion.init(&mut params, derive_seed(seed, "fusion-init"));
            let binding = FeatureBinding { ddpm_hash: source.ddpm_hash().to_string(), extraction: ext.clone(), fusion };
            (params, Some(taps), Some(binding))
        }
    };

    let trainable = |name: &str| match mode {
        DetectorMode::Baseline => true,
        DetectorMode::Diffyolo => ParamGroup::of(name).is_some_and(|g| policy.trainable.includes(g)),
    };
    let n = data.len();
    let per_epoch = n.div_ceil(policy.batch_size);
    let total = per_epoch * policy.epochs;
    let mut adam = Adam::new(AdamConfig { lr: policy.lr, weight_decay: policy.weight_decay, ..Default::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "detector-shuffle"));
    let mut aug_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "detector-augment"));
    let quantum = match &binding {
        Some(bd) => cfg.input_size / bd.extraction.resolution,
        None => 1,
    };
    let mut history = DetectorTrainHistory::default();
    let mut step = 0;
    for epoch in 0..policy.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(policy.batch_size) {
            adam.set_lr(policy.lr_at(step, total));
            let mut g = Graph::new();
            let b = g.bind(&params, |name| trainable(name));
            let tf: Vec<Transform> = chunk
                .iter()
                .map(|&i| policy.augment.sample(&mut aug_rng, cfg.input_size, quantum, &prep.truth[i]))
                .collect();
            let inputs = chunk.iter().zip(&tf).map(|(&i, t)| t.apply_map(&prep.inputs[i], 1)).collect::<Result<Vec<_>>>()?;
            let x = g.constant(Tensor::stack(&inputs)?);
            let fused = match (&taps, &binding) {
                (Some(t), Some(bd)) => {
                    let moved =
                        chunk.iter().zip(&tf).map(|(&i, tr)| tr.apply_taps(&t[i], cfg.input_size)).collect::<Result<Vec<_>>>()?;
                    Some(fused_var(&mut g, &b, &bd.fusion, &moved.iter().collect::<Vec<_>>())?)
                }
                _ => None,
            };
            let outs = det.forward(&mut g, &b, x, fused)?;
            let truth: Vec<Vec<GroundTruthBox>> =
                chunk.iter().zip(&tf).map(|(&i, t)| t.apply_boxes(&prep.truth[i], cfg.input_size)).collect();
            let (lv, comps) = detection_loss(&mut g, &outs, &truth, cfg.input_size, cfg.num_classes, &policy.loss)?;
            if !comps.total.is_finite() {
                return Err(CoreError::Divergence { step, loss: comps.total });
            }
            let grads = g.backward(lv.total)?;
            adam.step(&mut params, &grads.for_params(&b))?;
            sum += comps.total;
            history.steps.push(comps);
            step += 1;
        }
        let mean = sum / per_epoch.max(1) as f64;
        debug!("{mode} epoch {}: loss {mean:.4}", epoch + 1);
        history.epoch_loss.push(mean);
    }
    if let (Some(first), Some(last)) = (history.epoch_loss.first(), history.epoch_loss.last()) {
        info!("{mode} detector: loss {first:.4} -> {last:.4} over {} epochs", policy.epochs);
    }
    let ckpt = DetectorCheckpoint { config: cfg.clone(), mode, params, features: binding, hash: String::new() };
    Ok((ckpt, history))
}

const INFER_BATCH: usize = 16;

impl DetectorCheckpoint {
    pub fn detector(&self) -> Result<Detector> {
        Detector::new(&self.config)
    }

    /// Provenance hash of the features this checkpoint consumes, if any.
    pub fn feature_provenance(&self) -> Option<String> {
        self.features.as_ref().map(FeatureBinding::provenance_hash)
    }

    /// Raw per-image predictions. DiffYOLO checkpoints need a feature source
    /// matching the one they were trained with.
    pub fn raw_predictions(&self, data: &[AnnotatedImage], features: Option<&FeatureSource>) -> Result<Vec<RawPredictions>> {
        let det = self.detector()?;
        let prep = prepare(&self.config, data)?;
        let binding = match (&self.features, features) {
            (Some(b), Some(src)) => {
                b.check(src)?;
                Some((b, src))
            }
            (Some(_), None) => return invalid("this diffyolo checkpoint needs diffusion features"),
            (None, _) => None,
        };
        let mut out = Vec::with_capacity(data.len());
        for (k, chunk) in prep.inputs.chunks(INFER_BATCH).enumerate() {
            let items = &data[k * INFER_BATCH..k * INFER_BATCH + chunk.len()];
            let mut g = Graph::new();
            let b = g.bind(&self.params, |_| false);
            let x = g.constant(Tensor::stack(chunk)?);
            let fused = match binding {
                Some((bd, src)) => {
                    let taps = load_taps(src, items)?;
                    Some(fused_var(&mut g, &b, &bd.fusion, &taps.iter().collect::<Vec<_>>())?)
                }
                None => None,
            };
            let outs = det.forward(&mut g, &b, x, fused)?;
            let levels: Vec<&Tensor<f32>> = outs.iter().map(|&o| g.value(o)).collect();
            out.extend(RawPredictions::from_batch(&levels)?);
        }
        Ok(out)
    }

    pub fn predict(&self, data: &[AnnotatedImage], features: Option<&FeatureSource>, decode: &DecodeConfig) -> Result<Vec<Vec<Detection>>> {
        let side = self.config.input_size as f64;
        self.raw_predictions(data, features)?
            .iter()
            .map(|r| decode_and_nms(r, self.config.num_classes, side, side, decode))
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct DetectorEcho {
    config: DetectorConfig,
    mode: DetectorMode,
    features: Option<FeatureBinding>,
    feature_provenance: Option<String>,
}

/// Writes the checkpoint and returns its checksum.
pub fn save_detector(path: &Path, ckpt: &DetectorCheckpoint, meta: serde_json::Value) -> Result<String> {
    let mut c = Container::new(CHECKPOINT_MAGIC, "detector").with_params(&ckpt.params);
    c.config = canonical_json(&DetectorEcho {
        config: ckpt.config.clone(),
        mode: ckpt.mode,
        features: ckpt.features.clone(),
        feature_provenance: ckpt.feature_provenance(),
    })?;
    c.meta = canonical_json(&json!({ "meta": meta }))?;
    Ok(c.write(path)?)
}

pub fn load_detector(path: &Path) -> Result<DetectorCheckpoint> {
    let c = Container::read(path, CHECKPOINT_MAGIC)?;
    if c.kind != "detector" {
        return Err(CoreError::Checkpoint(format!("{} holds a `{}` checkpoint, not detector", path.display(), c.kind)));
    }
    let echo: DetectorEcho = serde_json::from_str(&c.config)?;
    if echo.features.is_some() != (echo.mode == DetectorMode::Diffyolo) {
        return Err(CoreError::Checkpoint("feature binding does not match the checkpoint mode".into()));
    }
    let params = c.params();
    let mut expected = Detector::new(&echo.config)?.init_params(0);
    if let Some(b) = &echo.features {
        b.fusion.init(&mut expected, 0);
    }
    for (name, t) in expected.iter() {
        let got = params.get(name).map_err(|_| CoreError::Checkpoint(format!("missing parameter `{name}`")))?;
        if got.shape() != t.shape() {
            return Err(CoreError::Checkpoint(format!("parameter `{name}` has shape {:?}", got.shape())));
        }
    }
    Ok(DetectorCheckpoint { config: echo.config, mode: echo.mode, params, features: echo.features, hash: c.digest() })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};
    use crate::ddpm::{DdpmCheckpoint, ScheduleConfig, UNet, UNetConfig};
    use crate::detector::model::InjectionConfig;
    use crate::features::{build_cache, FeatureCache};

    pub(crate) fn cfg(injection: bool) -> DetectorConfig {
        DetectorConfig {
            input_size: 32,
            stem_channels: 4,
            backbone_channels: [8, 8, 8],
            neck_channels: [8, 8, 8],
            max_groups: 2,
            injection: InjectionConfig { enabled: injection, stride: 8, fused_channels: 6 },
            ..Default::default()
        }
    }

    pub(crate) fn ddpm32() -> DdpmCheckpoint {
        let unet = UNetConfig {
            image_size: 32,
            base_channels: 4,
            channel_multipliers: vec![1, 2, 2],
            time_embed_dim: 8,
            tap_levels: vec![1, 2],
            max_groups: 2,
            ..Default::default()
        };
        let params = UNet::new(&unet).unwrap().init_params(3);
        DdpmCheckpoint { unet, schedule: ScheduleConfig::default(), params, hash: "ddpm-32".into() }
    }

    pub(crate) fn ext() -> ExtractionConfig {
        ExtractionConfig { timestep: 50, tap_levels: vec![1, 2], fused_channels: 6, resolution: 4, seed: 1 }
    }

    pub(crate) fn data(n: usize) -> Vec<AnnotatedImage> {
        generate_synthetic(&SyntheticConfig { count: n, image_size: 64, ..Default::default() }, 4)
            .unwrap()
            .into_iter()
            .map(|d| d.resized(32).unwrap())
            .collect()
    }

    fn quick() -> TrainPolicy {
        TrainPolicy { epochs: 2, batch_size: 4, warmup_steps: 1, ..Default::default() }
    }

    #[test]
    fn baseline_training_is_reproducible_and_finite() {
        let d = data(6);
        let (a, ha) = train_detector(&d, DetectorMode::Baseline, &cfg(false), None, None, &quick(), 3).unwrap();
        let (b, hb) = train_detector(&d, DetectorMode::Baseline, &cfg(false), None, None, &quick(), 3).unwrap();
        assert!(a.params.bitwise_eq(&b.params));
        assert_eq!(ha, hb);
        assert_eq!(ha.steps.len(), 4);
        assert!(ha.losses().iter().all(|l| l.is_finite()));
    }

    #[test]
    fn untrained_diffyolo_predicts_like_baseline() {
        let d = data(5);
        let ddpm = ddpm32();
        let ext = ext();
        let src = FeatureSource::OnTheFly { ddpm: &ddpm, cfg: &ext };
        let (base, _) = train_detector(&d, DetectorMode::Baseline, &cfg(false), None, None, &quick(), 1).unwrap();
        let zero = TrainPolicy { epochs: 0, ..quick() };
        let (dy, h) = train_detector(&d, DetectorMode::Diffyolo, &cfg(true), Some(&base), Some(&src), &zero, 1).unwrap();
        assert!(h.steps.is_empty());
        let a = base.raw_predictions(&d, None).unwrap();
        let b = dy.raw_predictions(&d, Some(&src)).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.bit_eq(y)));
        let dc = DecodeConfig::default();
        assert_eq!(base.predict(&d, None, &dc).unwrap(), dy.predict(&d, Some(&src), &dc).unwrap());
    }

    #[test]
    fn diffyolo_keeps_backbone_bitwise() {
        let d = data(6);
        let ddpm = ddpm32();
        let ext = ext();
        let src = FeatureSource::OnTheFly { ddpm: &ddpm, cfg: &ext };
        let (base, _) = train_detector(&d, DetectorMode::Baseline, &cfg(false), None, None, &quick(), 1).unwrap();
        for trainable in [Trainable::AdapterOnly, Trainable::AdapterHead, Trainable::AdapterNeckHead] {
            let policy = TrainPolicy { trainable, ..quick() };
            let (dy, _) = train_detector(&d, DetectorMode::Diffyolo, &cfg(true), Some(&base), Some(&src), &policy, 2).unwrap();
            for (name, t) in base.params.iter() {
                let same = dy.params.get(name).unwrap().bit_eq(t);
                let group = ParamGroup::of(name).unwrap();
                if !trainable.includes(group) {
                    assert!(same, "{name} changed under {trainable:?}");
                }
            }
            assert!(!dy.params.get("adapter.proj.weight").unwrap().data().iter().all(|&v| v == 0.0));
        }
        let all = TrainPolicy { trainable: Trainable::All, ..quick() };
        assert!(train_detector(&d, DetectorMode::Diffyolo, &cfg(true), Some(&base), Some(&src), &all, 2).is_err());
    }

    #[test]
    fn cached_and_live_features_train_identically() {
        let d = data(6);
        let ddpm = ddpm32();
        let ext = ext();
        let dir = tempfile::tempdir().unwrap();
        build_cache(&d, &ddpm, &ext, dir.path()).unwrap();
        let cache = FeatureCache::open(dir.path(), &ddpm.hash, &ext).unwrap();
        let (base, _) = train_detector(&d, DetectorMode::Baseline, &cfg(false), None, None, &quick(), 1).unwrap();
        let live = FeatureSource::OnTheFly { ddpm: &ddpm, cfg: &ext };
        let cached = FeatureSource::Cached(&cache);
        let (a, ha) = train_detector(&d, DetectorMode::Diffyolo, &cfg(true), Some(&base), Some(&live), &quick(), 5).unwrap();
        let (b, hb) = train_detector(&d, DetectorMode::Diffyolo, &cfg(true), Some(&base), Some(&cached), &quick(), 5).unwrap();
        assert_eq!(ha.losses().iter().map(|l| l.to_bits()).collect::<Vec<_>>(), hb.losses().iter().map(|l| l.to_bits()).collect::<Vec<_>>());
        assert!(a.params.bitwise_eq(&b.params));
    }

    #[test]
    fn provenance_is_checked_at_prediction() {
        let d = data(4);
        let ddpm = ddpm32();
        let ext = ext();
        let src = FeatureSource::OnTheFly { ddpm: &ddpm, cfg: &ext };
        let (base, _) = train_detector(&d, DetectorMode::Baseline, &cfg(false), None, None, &quick(), 1).unwrap();
        let (dy, _) = train_detector(&d, DetectorMode::Diffyolo, &cfg(true), Some(&base), Some(&src), &quick(), 1).unwrap();
        let mut other = ddpm32();
        other.hash = "other".into();
        let wrong = FeatureSource::OnTheFly { ddpm: &other, cfg: &ext };
        assert!(matches!(dy.raw_predictions(&d, Some(&wrong)), Err(CoreError::Provenance(_))));
        assert!(dy.raw_predictions(&d, None).is_err());
        assert!(train_detector(&d, DetectorMode::Diffyolo, &cfg(true), None, Some(&src), &quick(), 1).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let d = data(4);
        let ddpm = ddpm32();
        let ext = ext();
        let src = FeatureSource::OnTheFly { ddpm: &ddpm, cfg: &ext };
        let (base, _) = train_detector(&d, DetectorMode::Baseline, &cfg(false), None, None, &quick(), 1).unwrap();
        let (dy, _) = train_detector(&d, DetectorMode::Diffyolo, &cfg(true), Some(&base), Some(&src), &quick(), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for ck in [&base, &dy] {
            let p = dir.path().join(format!("{}.ckpt", ck.mode));
            let hash = save_detector(&p, ck, json!({})).unwrap();
            let back = load_detector(&p).unwrap();
            assert_eq!(back.hash, hash);
            assert_eq!((back.mode, &back.config, &back.features), (ck.mode, &ck.config, &ck.features));
            assert!(back.params.bitwise_eq(&ck.params));
        }
        assert!(crate::ddpm::load_checkpoint(&dir.path().join("baseline.ckpt")).is_err());
    }

    #[test]
    fn policy_groups_and_schedule() {
        assert!(!Trainable::AdapterHead.includes(ParamGroup::Neck));
        assert!(Trainable::AdapterNeckHead.includes(ParamGroup::Neck));
        assert!(Trainable::AdapterOnly.includes(ParamGroup::Fusion));
        assert!(!Trainable::AdapterNeckHead.includes(ParamGroup::Backbone));
        let p = TrainPolicy { warmup_steps: 2, lr: 1.0, ..Default::default() };
        assert_eq!(p.lr_at(0, 10), 0.5);
        assert!((p.lr_at(2, 10) - 1.0).abs() < 1e-12);
        assert!((p.lr_at(10, 10) - 0.05).abs() < 1e-12);
    }
}
