use std::collections::BTreeMap;

use diffyolo_nn::layers::{Conv2d, GroupNorm, Linear};
use diffyolo_nn::{derive_seed, Bindings, Element, Graph, ParamSet, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, CoreError, Result};
use crate::image::{ImageTensor, ValueRange};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub in_channels: usize,
    /// Square input side; must be divisible by `2^(levels - 1)`.
    pub image_size: usize,
    pub base_channels: usize,
    /// One multiplier per resolution level, finest first.
    pub channel_multipliers: Vec<usize>,
    pub time_embed_dim: usize,
    /// Decoder levels whose block outputs are exposed as feature taps.
    pub tap_levels: Vec<usize>,
    pub max_groups: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            image_size: 64,
            base_channels: 16,
            channel_multipliers: vec![1, 2, 2],
            time_embed_dim: 64,
            tap_levels: vec![1, 2],
            max_groups: 8,
        }
    }
}

impl UNetConfig {
    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_multipliers[level]
    }

    pub fn level_size(&self, level: usize) -> usize {
        self.image_size >> level
    }

    /// `(channels, height, width)` of the decoder block output at `level`.
    pub fn tap_shape(&self, level: usize) -> Result<(usize, usize, usize)> {
        if level >= self.levels() {
            return invalid(format!("tap level {level} not in decoder levels 0..{}", self.levels()));
        }
        let s = self.level_size(level);
        Ok((self.level_channels(level), s, s))
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels() < 2 {
            return invalid("U-Net needs at least 2 resolution levels");
        }
        if self.in_channels == 0 || self.base_channels == 0 || self.channel_multipliers.contains(&0) {
            return invalid("channel counts must be positive");
        }
        if self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return invalid("time_embed_dim must be a positive even number");
        }
        let div = 1usize << (self.levels() - 1);
        if self.image_size == 0 || !self.image_size.is_multiple_of(div) {
            return invalid(format!("image_size {} not divisible by {div}", self.image_size));
        }
        for &l in &self.tap_levels {
            self.tap_shape(l)?;
        }
        Ok(())
    }
}

/// Sinusoidal embedding `[sin(t·f_i)…, cos(t·f_i)…]` with `f_i = 10000^(−i/half)`.
pub fn timestep_embedding<T: Element>(timesteps: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(timesteps.len() * dim);
    for &t in timesteps {
        let freqs: Vec<f64> = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp()).collect();
        data.extend(freqs.iter().map(|f| T::from_f64_lossy((t as f64 * f).sin())));
        data.extend(freqs.iter().map(|f| T::from_f64_lossy((t as f64 * f).cos())));
    }
    Tensor::new(vec![timesteps.len(), dim], data).expect("embedding shape")
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(name: &str, in_c: usize, out_c: usize, temb_dim: usize, groups: usize) -> Self {
        Self {
            norm1: GroupNorm::new(format!("{name}.norm1"), in_c, groups),
            conv1: Conv2d::new(format!("{name}.conv1"), in_c, out_c, 3, 1),
            temb: Linear::new(format!("{name}.temb"), temb_dim, out_c),
            norm2: GroupNorm::new(format!("{name}.norm2"), out_c, groups),
            conv2: Conv2d::new(format!("{name}.conv2"), out_c, out_c, 3, 1),
            skip: (in_c != out_c).then(|| Conv2d::new(format!("{name}.skip"), in_c, out_c, 1, 1)),
        }
    }

    fn init(&self, ps: &mut ParamSet, seed: u64) {
        self.norm1.init(ps);
        self.conv1.init(ps, seed);
        self.temb.init(ps, seed);
        self.norm2.init(ps);
        self.conv2.init_scaled(ps, seed, 0.5);
        if let Some(s) = &self.skip {
            s.init_scaled(ps, seed, 1.0);
        }
    }

    fn forward<T: Element>(&self, g: &mut Graph<T>, b: &Bindings, x: Var, temb: Var) -> Result<Var> {
        let h = self.norm1.forward(g, b, x)?;
        let h = g.silu(h);
        let h = self.conv1.forward(g, b, h)?;
        let t = self.temb.forward(g, b, temb)?;
        let h = g.add_channel_vec(h, t)?;
        let h = self.norm2.forward(g, b, h)?;
        let h = g.silu(h);
        let h = self.conv2.forward(g, b, h)?;
        let skip = match &self.skip {
            Some(s) => s.forward(g, b, x)?,
            None => x,
        };
        Ok(g.add(skip, h)?)
    }
}

/// Result of a U-Net pass: the noise prediction (absent when the pass stopped
/// early) and the requested decoder taps.
pub struct UNetOutput {
    pub eps: Option<Var>,
    pub taps: BTreeMap<usize, Var>,
}

/// Small ε-prediction U-Net with timestep conditioning and decoder taps.
#[derive(Clone, Debug)]
pub struct UNet {
    cfg: UNetConfig,
    temb1: Linear,
    temb2: Linear,
    conv_in: Conv2d,
    enc: Vec<ResBlock>,
    down: Vec<Conv2d>,
    mid: ResBlock,
    dec: Vec<ResBlock>,
    up: Vec<Option<Conv2d>>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
}

impl UNet {
    pub fn new(cfg: &UNetConfig) -> Result<Self> {
        cfg.validate()?;
        let levels = cfg.levels();
        let d = cfg.time_embed_dim;
        let gmax = cfg.max_groups;
        let mut enc = Vec::new();
        let mut down = Vec::new();
        let mut prev = cfg.base_channels;
        for l in 0..levels {
            let ch = cfg.level_channels(l);
            enc.push(ResBlock::new(&format!("unet.enc.{l}"), prev, ch, d, gmax));
            if l + 1 < levels {
                down.push(Conv2d::new(format!("unet.down.{l}"), ch, ch, 3, 2));
            }
            prev = ch;
        }
        let deepest = cfg.level_channels(levels - 1);
        let mid = ResBlock::new("unet.mid", deepest, deepest, d, gmax);
        let mut dec = Vec::new();
        let mut up = Vec::new();
        for l in 0..levels {
            let ch = cfg.level_channels(l);
            dec.push(ResBlock::new(&format!("unet.dec.{l}"), 2 * ch, ch, d, gmax));
            up.push((l > 0).then(|| Conv2d::new(format!("unet.up.{l}"), ch, cfg.level_channels(l - 1), 3, 1)));
        }
        Ok(Self {
            temb1: Linear::new("unet.temb.0", d, d),
            temb2: Linear::new("unet.temb.1", d, d),
            conv_in: Conv2d::new("unet.conv_in", cfg.in_channels, cfg.base_channels, 3, 1),
            enc,
            down,
            mid,
            dec,
            up,
            out_norm: GroupNorm::new("unet.out.norm", cfg.base_channels, gmax),
            out_conv: Conv2d::new("unet.out.conv", cfg.base_channels, cfg.in_channels, 3, 1),
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    /// Fresh parameters; the output convolution starts at zero.
    pub fn init_params(&self, seed: u64) -> ParamSet {
        let mut ps = ParamSet::new();
        let s = |name: &str| derive_seed(seed, name);
        self.temb1.init(&mut ps, s("temb"));
        self.temb2.init(&mut ps, s("temb"));
        self.conv_in.init(&mut ps, s("conv_in"));
        for blk in self.enc.iter().chain(std::iter::once(&self.mid)).chain(&self.dec) {
            blk.init(&mut ps, seed);
        }
        for c in self.down.iter().chain(self.up.iter().flatten()) {
            c.init(&mut ps, seed);
        }
        self.out_norm.init(&mut ps);
        self.out_conv.init_zero(&mut ps);
        ps
    }

    /// Runs the network on `x [n, c, s, s]` at per-sample timesteps `t`.
    ///
    /// With `full_output == false` the decoder stops once the finest requested
    /// tap has been produced and `eps` is `None`.
    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        b: &Bindings,
        x: Var,
        t: &[usize],
        taps: &[usize],
        full_output: bool,
    ) -> Result<UNetOutput> {
        let cfg = &self.cfg;
        for &l in taps {
            cfg.tap_shape(l)?;
        }
        let shape = g.shape(x).to_vec();
        let expect = [t.len(), cfg.in_channels, cfg.image_size, cfg.image_size];
        if shape != expect {
            return Err(CoreError::Shape(format!("U-Net input {shape:?}, expected {expect:?}")));
        }
        let levels = cfg.levels();
        let emb = g.constant(timestep_embedding(t, cfg.time_embed_dim));
        let emb = self.temb1.forward(g, b, emb)?;
        let emb = g.silu(emb);
        let emb = self.temb2.forward(g, b, emb)?;
        let temb = g.silu(emb);

        let mut h = self.conv_in.forward(g, b, x)?;
        let mut skips = Vec::with_capacity(levels);
        for l in 0..levels {
            h = self.enc[l].forward(g, b, h, temb)?;
            skips.push(h);
            if l + 1 < levels {
                h = self.down[l].forward(g, b, h)?;
            }
        }
        h = self.mid.forward(g, b, h, temb)?;

        let stop_at = if full_output { 0 } else { taps.iter().copied().min().unwrap_or(levels - 1) };
        let mut out_taps = BTreeMap::new();
        for l in (0..levels).rev() {
            let cat = g.concat_channels(&[h, skips[l]])?;
            h = self.dec[l].forward(g, b, cat, temb)?;
            if taps.contains(&l) {
                out_taps.insert(l, h);
            }
            if l == stop_at && !full_output {
                return Ok(UNetOutput { eps: None, taps: out_taps });
            }
            if let Some(up) = &self.up[l] {
                let u = g.upsample_nearest(h, 2)?;
                h = up.forward(g, b, u)?;
            }
        }
        let h = self.out_norm.forward(g, b, h)?;
        let h = g.silu(h);
        let eps = self.out_conv.forward(g, b, h)?;
        Ok(UNetOutput { eps: Some(eps), taps: out_taps })
    }

    /// Inference on a single image: returns `(ε̂, taps)` with taps as `[c, h, w]`.
    pub fn infer(
        &self,
        params: &ParamSet,
        x_t: &ImageTensor,
        t: usize,
        taps: &[usize],
    ) -> Result<(ImageTensor, BTreeMap<usize, Tensor<f32>>)> {
        let (g, out) = self.run_single(params, x_t, t, taps, true)?;
        let eps = out.eps.expect("full output requested");
        let eps = g.value(eps).clone();
        let (_, c, h, w) = eps.dims4()?;
        let eps = ImageTensor::from_tensor(eps.reshape(vec![c, h, w])?, ValueRange::Symmetric)?;
        let taps = collect_taps(&g, &out.taps)?;
        Ok((eps, taps))
    }

    /// Only the requested decoder taps of a single image, skipping the output head.
    pub fn extract_taps(
        &self,
        params: &ParamSet,
        x_t: &ImageTensor,
        t: usize,
        taps: &[usize],
    ) -> Result<BTreeMap<usize, Tensor<f32>>> {
        let (g, out) = self.run_single(params, x_t, t, taps, false)?;
        collect_taps(&g, &out.taps)
    }

    fn run_single(
        &self,
        params: &ParamSet,
        x_t: &ImageTensor,
        t: usize,
        taps: &[usize],
        full: bool,
    ) -> Result<(Graph<f32>, UNetOutput)> {
        let mut g = Graph::new();
        let b = g.bind(params, |_| false);
        let (c, h, w) = x_t.shape();
        let x = g.constant(x_t.tensor().clone().reshape(vec![1, c, h, w])?);
        let out = self.forward(&mut g, &b, x, &[t], taps, full)?;
        Ok((g, out))
    }
}

fn collect_taps(g: &Graph<f32>, taps: &BTreeMap<usize, Var>) -> Result<BTreeMap<usize, Tensor<f32>>> {
    taps.iter()
        .map(|(&l, &v)| {
            let t = g.value(v).clone();
            let (_, c, h, w) = t.dims4()?;
            Ok((l, t.reshape(vec![c, h, w])?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> UNetConfig {
        UNetConfig {
            image_size: 16,
            base_channels: 4,
            channel_multipliers: vec![1, 2, 2],
            time_embed_dim: 8,
            ..Default::default()
        }
    }

    #[test]
    fn tap_shapes_follow_config() {
        let cfg = UNetConfig { image_size: 64, base_channels: 8, channel_multipliers: vec![1, 2, 4], ..Default::default() };
        assert_eq!(cfg.tap_shape(0).unwrap(), (8, 64, 64));
        assert_eq!(cfg.tap_shape(1).unwrap(), (16, 32, 32));
        assert_eq!(cfg.tap_shape(2).unwrap(), (32, 16, 16));
        assert!(cfg.tap_shape(3).is_err());
    }

    #[test]
    fn validate_rejects_bad_configs() {
        let mut c = small_cfg();
        c.channel_multipliers = vec![1];
        assert!(c.validate().is_err());
        let mut c = small_cfg();
        c.image_size = 18;
        assert!(c.validate().is_err());
        let mut c = small_cfg();
        c.tap_levels = vec![9];
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_output_head_predicts_zero_noise() {
        let cfg = small_cfg();
        let net = UNet::new(&cfg).unwrap();
        let ps = net.init_params(1);
        let x = ImageTensor::filled(1, 16, 16, 0.3, ValueRange::Symmetric);
        let (eps, taps) = net.infer(&ps, &x, 5, &[1, 2]).unwrap();
        assert!(eps.data().iter().all(|&v| v == 0.0));
        assert_eq!(taps[&1].shape(), &[8, 8, 8]);
        assert_eq!(taps[&2].shape(), &[8, 4, 4]);
    }

    #[test]
    fn early_stop_taps_equal_full_pass_taps() {
        let cfg = small_cfg();
        let net = UNet::new(&cfg).unwrap();
        let ps = net.init_params(2);
        let x = ImageTensor::new(1, 16, 16, (0..256).map(|i| (i as f32 * 0.1).sin()).collect(), ValueRange::Symmetric)
            .unwrap();
        let (_, full) = net.infer(&ps, &x, 7, &[1, 2]).unwrap();
        let early = net.extract_taps(&ps, &x, 7, &[1, 2]).unwrap();
        for l in [1, 2] {
            assert!(full[&l].bit_eq(&early[&l]));
        }
    }

    #[test]
    fn missing_tap_level_is_an_error() {
        let net = UNet::new(&small_cfg()).unwrap();
        let ps = net.init_params(0);
        let x = ImageTensor::filled(1, 16, 16, 0.0, ValueRange::Symmetric);
        assert!(net.extract_taps(&ps, &x, 1, &[3]).is_err());
    }

    #[test]
    fn embedding_is_sin_then_cos() {
        let e = timestep_embedding::<f64>(&[0, 3], 4);
        assert_eq!(e.data()[..4], [0.0, 0.0, 1.0, 1.0]);
        assert!((e.data()[4] - 3f64.sin()).abs() < 1e-15);
        assert!((e.data()[5] - (3.0 * 0.01f64).sin()).abs() < 1e-15);
    }
}
