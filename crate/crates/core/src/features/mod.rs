//! Diffusion features: noised-image U-Net taps, resized to the injection
//! resolution, projected to a common width and summed.
//!
//! The on-disk cache stores the resized taps before projection, because the
//! projections are trained together with the detector adapter.

mod cache;

use diffyolo_nn::kernels::resize_bilinear;
use diffyolo_nn::{derive_seed, Bindings, Element, Graph, ParamSet, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ddpm::{q_sample, standard_normal, DdpmCheckpoint, UNet, UNetConfig};
use crate::error::{invalid, CoreError, Result};
use crate::hashing::sha256_hex;
use crate::image::{ImageTensor, ValueRange};

pub use cache::{
    build_cache, load_feature, save_feature, CacheBuildReport, CacheEntry, CacheManifest, FeatureCache, FeatureSource,
    MANIFEST_FILE, MANIFEST_VERSION,
};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractionConfig {
    /// Diffusion timestep at which the image is noised before the U-Net pass.
    pub timestep: usize,
    pub tap_levels: Vec<usize>,
    /// Channel count of the fused map.
    pub fused_channels: usize,
    /// Side of the fused map; equals detector input / injection stride.
    pub resolution: usize,
    /// Global seed from which per-image ε seeds are derived.
    pub seed: u64,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self { timestep: 50, tap_levels: vec![1, 2], fused_channels: 32, resolution: 8, seed: 0 }
    }
}

impl ExtractionConfig {
    pub fn eps_seed(&self, image_id: &str) -> u64 {
        derive_seed(self.seed, image_id)
    }

    pub fn validate_against(&self, unet: &UNetConfig, steps: usize) -> Result<()> {
        if self.timestep == 0 || self.timestep > steps {
            return invalid(format!("extraction timestep {} outside 1..={steps}", self.timestep));
        }
        if self.tap_levels.is_empty() {
            return invalid("at least one tap level is required");
        }
        let mut sorted = self.tap_levels.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.tap_levels.len() {
            return invalid("tap levels must be distinct");
        }
        for &l in &self.tap_levels {
            unet.tap_shape(l)?;
        }
        if self.fused_channels == 0 || self.resolution == 0 {
            return invalid("fused_channels and resolution must be positive");
        }
        Ok(())
    }
}

/// Everything that determines a feature map's values.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub image_id: String,
    /// SHA-256 of the image shape and f32 pixels.
    pub image_hash: String,
    pub timestep: usize,
    pub tap_levels: Vec<usize>,
    pub eps_seed: u64,
    pub ddpm_hash: String,
    pub resolution: usize,
}

pub fn image_hash(image: &ImageTensor) -> String {
    let (c, h, w) = image.shape();
    let mut bytes = Vec::with_capacity(12 + image.data().len() * 4);
    for d in [c, h, w] {
        bytes.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in image.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    sha256_hex(&bytes)
}

/// One resized decoder tap.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub level: usize,
    pub timestep: usize,
    /// `[c, resolution, resolution]`
    pub data: Tensor<f32>,
}

/// All taps of one image, in ascending level order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTaps {
    pub maps: Vec<FeatureMap>,
    pub provenance: Provenance,
}

impl FeatureTaps {
    pub fn bit_eq(&self, other: &FeatureTaps) -> bool {
        self.provenance == other.provenance
            && self.maps.len() == other.maps.len()
            && self.maps.iter().zip(&other.maps).all(|(a, b)| a.level == b.level && a.data.bit_eq(&b.data))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedFeature {
    /// `[fused_channels, resolution, resolution]`
    pub data: Tensor<f32>,
    pub provenance: Provenance,
}

/// Noises `image` (in `[0, 1]`) to the configured timestep with a seeded ε,
/// runs the U-Net and resizes each requested tap to the fused resolution.
pub fn extract_taps(image: &ImageTensor, image_id: &str, ddpm: &DdpmCheckpoint, cfg: &ExtractionConfig) -> Result<FeatureTaps> {
    let schedule = ddpm.schedule.build()?;
    cfg.validate_against(&ddpm.unet, schedule.steps())?;
    let expect = (ddpm.unet.in_channels, ddpm.unet.image_size, ddpm.unet.image_size);
    if image.shape() != expect {
        return Err(CoreError::Shape(format!("image {:?} but the diffusion model expects {expect:?}", image.shape())));
    }
    if image.range() != ValueRange::Unit {
        return invalid("feature extraction expects a [0, 1] image");
    }
    let eps_seed = cfg.eps_seed(image_id);
    let (c, h, w) = image.shape();
    let eps = standard_normal(&mut ChaCha8Rng::seed_from_u64(eps_seed), c, h, w);
    let x_t = q_sample(&image.to_range(ValueRange::Symmetric), cfg.timestep, &eps, &schedule)?;
    let net = UNet::new(&ddpm.unet)?;
    let raw = net.extract_taps(&ddpm.params, &x_t, cfg.timestep, &cfg.tap_levels)?;
    let mut levels = cfg.tap_levels.clone();
    levels.sort_unstable();
    let r = cfg.resolution;
    let maps = levels
        .iter()
        .map(|&l| {
            let t = raw.get(&l).ok_or_else(|| CoreError::Invalid(format!("U-Net produced no tap at level {l}")))?;
            let (tc, th, tw) = match t.shape() {
                [a, b, c] => (*a, *b, *c),
                s => return Err(CoreError::Shape(format!("tap shape {s:?}"))),
            };
            let data = Tensor::new(vec![tc, r, r], resize_bilinear(t.data(), tc, th, tw, r, r))?;
            Ok(FeatureMap { level: l, timestep: cfg.timestep, data })
        })
        .collect::<Result<Vec<_>>>()?;
    let provenance = Provenance {
        image_id: image_id.to_string(),
        image_hash: image_hash(image),
        timestep: cfg.timestep,
        tap_levels: levels,
        eps_seed,
        ddpm_hash: ddpm.hash.clone(),
        resolution: r,
    };
    Ok(FeatureTaps { maps, provenance })
}

/// Per-tap 1×1 projections (no bias) to a common width, summed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fusion {
    /// `(level, channels)` in ascending level order.
    pub inputs: Vec<(usize, usize)>,
    pub out_channels: usize,
}

impl Fusion {
    pub const PREFIX: &'static str = "fusion.";

    pub fn new(unet: &UNetConfig, cfg: &ExtractionConfig) -> Result<Self> {
        let mut levels = cfg.tap_levels.clone();
        levels.sort_unstable();
        let inputs = levels.iter().map(|&l| unet.tap_shape(l).map(|s| (l, s.0))).collect::<Result<Vec<_>>>()?;
        Ok(Self { inputs, out_channels: cfg.fused_channels })
    }

    /// Input widths read off extracted taps.
    pub fn from_taps(taps: &FeatureTaps, out_channels: usize) -> Self {
        let inputs = taps.maps.iter().map(|m| (m.level, m.data.shape()[0])).collect();
        Self { inputs, out_channels }
    }

    pub fn weight_name(level: usize) -> String {
        format!("fusion.proj.{level}.weight")
    }

    /// Normal weights scaled so the sum has roughly unit gain.
    pub fn init(&self, ps: &mut ParamSet, seed: u64) {
        let fan_in: usize = self.inputs.iter().map(|i| i.1).sum();
        for &(l, c) in &self.inputs {
            let name = Self::weight_name(l);
            ps.init_normal(seed, &name, vec![self.out_channels, c, 1, 1], (1.0 / fan_in as f64).sqrt());
        }
    }

    /// `taps[i]` is the batched `[n, c_i, r, r]` map for `self.inputs[i]`.
    pub fn forward<T: Element>(&self, g: &mut Graph<T>, b: &Bindings, taps: &[Var]) -> Result<Var> {
        if taps.len() != self.inputs.len() {
            return invalid(format!("fusion expects {} taps, got {}", self.inputs.len(), taps.len()));
        }
        let mut acc: Option<Var> = None;
        for (&(l, _), &x) in self.inputs.iter().zip(taps) {
            let y = g.conv2d(x, b.get(&Self::weight_name(l))?, 1, 0)?;
            acc = Some(match acc {
                Some(a) => g.add(a, y)?,
                None => y,
            });
        }
        Ok(acc.expect("at least one tap"))
    }

    /// Stacks the taps of several images into one `[n, c, r, r]` tensor per level.
    pub fn batch_taps<T: Element>(&self, items: &[&FeatureTaps]) -> Result<Vec<Tensor<T>>> {
        self.inputs
            .iter()
            .map(|&(l, c)| {
                let maps = items
                    .iter()
                    .map(|ft| {
                        let m = ft
                            .maps
                            .iter()
                            .find(|m| m.level == l)
                            .ok_or_else(|| CoreError::Invalid(format!("{}: no tap at level {l}", ft.provenance.image_id)))?;
                        if m.data.shape()[0] != c {
                            return Err(CoreError::Shape(format!("tap {l} has {} channels, expected {c}", m.data.shape()[0])));
                        }
                        Ok(m.data.cast::<T>())
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Tensor::stack(&maps)?)
            })
            .collect()
    }

    /// Fused map of a single image.
    pub fn fuse(&self, params: &ParamSet, taps: &FeatureTaps) -> Result<FusedFeature> {
        let mut g = Graph::new();
        let b = g.bind(params, |_| false);
        let vars: Vec<Var> =
            self.batch_taps::<f32>(&[taps])?.into_iter().map(|t| g.constant(t)).collect();
        let y = self.forward(&mut g, &b, &vars)?;
        let v = g.value(y);
        let (_, c, h, w) = v.dims4()?;
        Ok(FusedFeature { data: v.clone().reshape(vec![c, h, w])?, provenance: taps.provenance.clone() })
    }
}

/// Taps followed by fusion with the given projection weights.
pub fn extract_fused(
    image: &ImageTensor,
    image_id: &str,
    ddpm: &DdpmCheckpoint,
    cfg: &ExtractionConfig,
    fusion_params: &ParamSet,
) -> Result<FusedFeature> {
    let taps = extract_taps(image, image_id, ddpm, cfg)?;
    Fusion::new(&ddpm.unet, cfg)?.fuse(fusion_params, &taps)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::ddpm::ScheduleConfig;

    pub(crate) fn tiny_ddpm() -> DdpmCheckpoint {
        let unet = UNetConfig {
            image_size: 16,
            base_channels: 4,
            channel_multipliers: vec![1, 2, 2],
            time_embed_dim: 8,
            tap_levels: vec![1, 2],
            max_groups: 2,
            ..Default::default()
        };
        let params = UNet::new(&unet).unwrap().init_params(3);
        DdpmCheckpoint { unet, schedule: ScheduleConfig::default(), params, hash: "ddpm-a".into() }
    }

    pub(crate) fn tiny_cfg() -> ExtractionConfig {
        ExtractionConfig { timestep: 50, tap_levels: vec![1, 2], fused_channels: 6, resolution: 4, seed: 1 }
    }

    pub(crate) fn image(k: usize) -> ImageTensor {
        let d = (0..256).map(|i| ((i * 7 + k * 13) % 17) as f32 / 16.0).collect();
        ImageTensor::new(1, 16, 16, d, ValueRange::Unit).unwrap()
    }

    #[test]
    fn taps_have_fused_resolution() {
        let ddpm = tiny_ddpm();
        let taps = extract_taps(&image(0), "a", &ddpm, &tiny_cfg()).unwrap();
        assert_eq!(taps.maps.len(), 2);
        assert_eq!(taps.maps[0].data.shape(), &[8, 4, 4]);
        assert_eq!(taps.maps[1].data.shape(), &[8, 4, 4]);
        assert!(taps.maps.iter().all(|m| m.data.is_finite()));
        assert_eq!(taps.provenance.eps_seed, derive_seed(1, "a"));
    }

    #[test]
    fn extraction_is_deterministic_and_id_seeded() {
        let ddpm = tiny_ddpm();
        let a = extract_taps(&image(0), "a", &ddpm, &tiny_cfg()).unwrap();
        let b = extract_taps(&image(0), "a", &ddpm, &tiny_cfg()).unwrap();
        let c = extract_taps(&image(0), "b", &ddpm, &tiny_cfg()).unwrap();
        assert!(a.bit_eq(&b));
        assert!(!a.maps[0].data.bit_eq(&c.maps[0].data));
    }

    #[test]
    fn bad_requests_rejected() {
        let ddpm = tiny_ddpm();
        let mut cfg = tiny_cfg();
        cfg.tap_levels = vec![3];
        assert!(extract_taps(&image(0), "a", &ddpm, &cfg).is_err());
        let mut cfg = tiny_cfg();
        cfg.timestep = 1001;
        assert!(extract_taps(&image(0), "a", &ddpm, &cfg).is_err());
        let small = ImageTensor::filled(1, 8, 8, 0.5, ValueRange::Unit);
        assert!(extract_taps(&small, "a", &ddpm, &tiny_cfg()).is_err());
    }

    fn identity_params(c: usize, level: usize) -> ParamSet {
        let mut ps = ParamSet::new();
        let w = Tensor::from_fn(vec![c, c, 1, 1], |i| if i / c == i % c { 1.0 } else { 0.0 });
        ps.insert(Fusion::weight_name(level), w);
        ps
    }

    #[test]
    fn single_tap_identity_fusion_is_exact() {
        let ddpm = tiny_ddpm();
        let cfg = ExtractionConfig { tap_levels: vec![2], fused_channels: 8, resolution: 4, ..tiny_cfg() };
        let taps = extract_taps(&image(1), "x", &ddpm, &cfg).unwrap();
        let fusion = Fusion::new(&ddpm.unet, &cfg).unwrap();
        let fused = fusion.fuse(&identity_params(8, 2), &taps).unwrap();
        assert_eq!(fused.data.data(), taps.maps[0].data.data());
    }

    #[test]
    fn zero_projections_give_zero_map() {
        let ddpm = tiny_ddpm();
        let cfg = tiny_cfg();
        let taps = extract_taps(&image(2), "x", &ddpm, &cfg).unwrap();
        let fusion = Fusion::new(&ddpm.unet, &cfg).unwrap();
        let mut ps = ParamSet::new();
        for &(l, c) in &fusion.inputs {
            ps.init_const(&Fusion::weight_name(l), vec![6, c, 1, 1], 0.0);
        }
        assert!(fusion.fuse(&ps, &taps).unwrap().data.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fusion_is_linear_in_taps() {
        let ddpm = tiny_ddpm();
        let cfg = tiny_cfg();
        let taps = extract_taps(&image(3), "x", &ddpm, &cfg).unwrap();
        let fusion = Fusion::new(&ddpm.unet, &cfg).unwrap();
        let mut ps = ParamSet::new();
        fusion.init(&mut ps, 5);
        let both = fusion.fuse(&ps, &taps).unwrap();
        let mut parts = Vec::new();
        for (i, &(l, c)) in fusion.inputs.iter().enumerate() {
            let single = Fusion { inputs: vec![(l, c)], out_channels: 6 };
            let t = FeatureTaps { maps: vec![taps.maps[i].clone()], provenance: taps.provenance.clone() };
            parts.push(single.fuse(&ps, &t).unwrap());
        }
        let sum = parts[0].data.zip_map(&parts[1].data, |a, b| a + b).unwrap();
        assert_eq!(both.data.shape(), &[6, 4, 4]);
        assert!(both.data.max_abs_diff(&sum).unwrap() < 1e-6);
    }

    #[test]
    fn fused_shape_independent_of_levels() {
        let ddpm = tiny_ddpm();
        for levels in [vec![1], vec![2], vec![0, 2], vec![0, 1, 2]] {
            let cfg = ExtractionConfig { tap_levels: levels, ..tiny_cfg() };
            let fusion = Fusion::new(&ddpm.unet, &cfg).unwrap();
            let mut ps = ParamSet::new();
            fusion.init(&mut ps, 0);
            let f = extract_fused(&image(0), "a", &ddpm, &cfg, &ps).unwrap();
            assert_eq!(f.data.shape(), &[6, 4, 4]);
        }
    }

    /// Interpolation matrix from the tent kernel with clamped sample
    /// positions, built independently of the resize kernel.
    fn tent_matrix(inp: usize, out: usize) -> Vec<Vec<f64>> {
        (0..out)
            .map(|o| {
                let pos = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
                (0..inp).map(|i| (1.0 - (pos - i as f64).abs()).max(0.0)).collect()
            })
            .collect()
    }

    #[test]
    fn resize_matches_separable_oracle() {
        let src: Vec<f64> = (0..16).map(|i| (i / 4) as f64 * 0.3 + (i % 4) as f64 * 0.1 + ((i * 5) % 3) as f64 * 0.01).collect();
        for (oh, ow) in [(8, 8), (2, 2), (3, 5), (4, 4)] {
            let got = resize_bilinear(&src.iter().map(|&v| v as f32).collect::<Vec<_>>(), 1, 4, 4, oh, ow);
            let (my, mx) = (tent_matrix(4, oh), tent_matrix(4, ow));
            for y in 0..oh {
                for x in 0..ow {
                    let mut want = 0.0;
                    for i in 0..4 {
                        for j in 0..4 {
                            want += my[y][i] * src[i * 4 + j] * mx[x][j];
                        }
                    }
                    assert!((got[y * ow + x] as f64 - want).abs() < 1e-6, "{oh}x{ow} at ({y},{x})");
                }
            }
        }
        // a ramp stays a ramp away from the clamped border
        let ramp: Vec<f32> = (0..16).map(|i| (i % 4) as f32).collect();
        let up = resize_bilinear(&ramp, 1, 4, 4, 8, 8);
        for (x, v) in up.iter().enumerate().take(7).skip(1) {
            assert!((v - (x as f32 * 0.5 - 0.25)).abs() < 1e-6);
        }
    }
}
