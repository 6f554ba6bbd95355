use diffyolo_nn::layers::{Conv2d, ConvNormAct};
use diffyolo_nn::{derive_seed, Bindings, Element, Graph, ParamSet, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, CoreError, Result};

/// Output strides of the three detection levels, finest first.
pub const STRIDES: [usize; 3] = [8, 16, 32];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InjectionConfig {
    pub enabled: bool,
    /// Stride of the neck branch that receives the fused features.
    pub stride: usize,
    /// Channels of the fused map entering the adapter.
    pub fused_channels: usize,
}

impl Default for InjectionConfig {
    fn default() -> Self {
        Self { enabled: false, stride: 8, fused_channels: 32 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    /// Square input side, a multiple of 32.
    pub input_size: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub stem_channels: usize,
    /// Backbone widths at strides 8, 16 and 32.
    pub backbone_channels: [usize; 3],
    /// Neck branch widths at strides 8, 16 and 32.
    pub neck_channels: [usize; 3],
    pub max_groups: usize,
    /// Initial objectness probability, sets the objectness bias.
    pub objectness_prior: f64,
    pub injection: InjectionConfig,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            in_channels: 1,
            num_classes: crate::data::NUM_CLASSES,
            stem_channels: 8,
            backbone_channels: [24, 32, 48],
            neck_channels: [24, 32, 32],
            max_groups: 4,
            objectness_prior: 0.01,
            injection: InjectionConfig::default(),
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || !self.input_size.is_multiple_of(32) {
            return invalid(format!("detector input size {} is not a positive multiple of 32", self.input_size));
        }
        let widths = [self.in_channels, self.num_classes, self.stem_channels, self.max_groups];
        if widths.iter().chain(&self.backbone_channels).chain(&self.neck_channels).any(|&c| c == 0) {
            return invalid("detector channel counts must be positive");
        }
        if !(self.objectness_prior > 0.0 && self.objectness_prior < 1.0) {
            return invalid("objectness_prior must lie in (0, 1)");
        }
        if !STRIDES.contains(&self.injection.stride) {
            return invalid(format!("injection stride {} not one of {STRIDES:?}", self.injection.stride));
        }
        if self.injection.fused_channels == 0 {
            return invalid("injection fused_channels must be positive");
        }
        Ok(())
    }

    /// Side of the prediction grid at `stride`.
    pub fn grid(&self, stride: usize) -> usize {
        self.input_size / stride
    }

    /// Expected `[c, h, w]` of the fused map.
    pub fn fused_shape(&self) -> [usize; 3] {
        let g = self.grid(self.injection.stride);
        [self.injection.fused_channels, g, g]
    }

    /// Channels per prediction cell: box, objectness and classes.
    pub fn outputs(&self) -> usize {
        5 + self.num_classes
    }
}

/// Parameter groups, selected by name prefix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    Neck,
    Adapter,
    Fusion,
    Head,
}

impl ParamGroup {
    pub fn of(name: &str) -> Option<Self> {
        let prefix = name.split('.').next()?;
        Some(match prefix {
            "backbone" => ParamGroup::Backbone,
            "neck" => ParamGroup::Neck,
            "adapter" => ParamGroup::Adapter,
            "fusion" => ParamGroup::Fusion,
            "head" => ParamGroup::Head,
            _ => return None,
        })
    }
}

/// Split transform merge: two 1×1 branches, one refined by a residual 3×3.
#[derive(Clone, Debug)]
struct Csp {
    left: ConvNormAct,
    right: ConvNormAct,
    inner: ConvNormAct,
    merge: ConvNormAct,
}

impl Csp {
    fn new(name: &str, in_c: usize, out_c: usize, groups: usize) -> Self {
        let h = (out_c / 2).max(1);
        Self {
            left: ConvNormAct::new(&format!("{name}.left"), in_c, h, 1, 1, groups),
            right: ConvNormAct::new(&format!("{name}.right"), in_c, h, 1, 1, groups),
            inner: ConvNormAct::new(&format!("{name}.inner"), h, h, 3, 1, groups),
            merge: ConvNormAct::new(&format!("{name}.merge"), 2 * h, out_c, 1, 1, groups),
        }
    }

    fn init(&self, ps: &mut ParamSet, seed: u64) {
        for l in [&self.left, &self.right, &self.inner, &self.merge] {
            l.init(ps, seed);
        }
    }

    fn forward<T: Element>(&self, g: &mut Graph<T>, b: &Bindings, x: Var) -> Result<Var> {
        let a = self.left.forward(g, b, x)?;
        let r = self.right.forward(g, b, x)?;
        let m = self.inner.forward(g, b, r)?;
        let r = g.add(r, m)?;
        let cat = g.concat_channels(&[a, r])?;
        Ok(self.merge.forward(g, b, cat)?)
    }
}

#[derive(Clone, Debug)]
struct Head {
    stem: ConvNormAct,
    bbox: Conv2d,
    obj: Conv2d,
    cls: Conv2d,
}

/// The detector's layer structure. Weights live in a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Detector {
    cfg: DetectorConfig,
    stem: ConvNormAct,
    downs: Vec<ConvNormAct>,
    stages: Vec<Csp>,
    lat5: ConvNormAct,
    csp4: Csp,
    lat4: ConvNormAct,
    csp3: Csp,
    adapter: Option<Conv2d>,
    heads: Vec<Head>,
}

impl Detector {
    pub const ADAPTER: &'static str = "adapter.proj";

    pub fn new(cfg: &DetectorConfig) -> Result<Self> {
        cfg.validate()?;
        let g = cfg.max_groups;
        let s = cfg.stem_channels;
        let [b3, b4, b5] = cfg.backbone_channels;
        let [n3, n4, n5] = cfg.neck_channels;
        let widths = [s, 2 * s, b3, b4, b5];
        let mut downs = Vec::new();
        let mut stages = Vec::new();
        for i in 1..widths.len() {
            downs.push(ConvNormAct::new(&format!("backbone.down{i}"), widths[i - 1], widths[i], 3, 2, g));
            stages.push(Csp::new(&format!("backbone.stage{i}"), widths[i], widths[i], g));
        }
        let adapter = cfg.injection.enabled.then(|| {
            let n = cfg.neck_channels[STRIDES.iter().position(|&x| x == cfg.injection.stride).expect("validated")];
            Conv2d::new(Self::ADAPTER, n + cfg.injection.fused_channels, n, 1, 1)
        });
        let heads = STRIDES
            .iter()
            .zip(cfg.neck_channels)
            .map(|(st, n)| Head {
                stem: ConvNormAct::new(&format!("head.s{st}.stem"), n, n, 3, 1, g),
                bbox: Conv2d::new(format!("head.s{st}.box"), n, 4, 1, 1),
                obj: Conv2d::new(format!("head.s{st}.obj"), n, 1, 1, 1),
                cls: Conv2d::new(format!("head.s{st}.cls"), n, cfg.num_classes, 1, 1),
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            stem: ConvNormAct::new("backbone.stem", cfg.in_channels, s, 3, 2, g),
            downs,
            stages,
            lat5: ConvNormAct::new("neck.lat5", b5, n5, 1, 1, g),
            csp4: Csp::new("neck.csp4", n5 + b4, n4, g),
            lat4: ConvNormAct::new("neck.lat4", n4, n3, 1, 1, g),
            csp3: Csp::new("neck.csp3", n3 + b3, n3, g),
            adapter,
            heads,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.cfg
    }

    /// Fresh weights. The adapter, when present, starts at zero.
    pub fn init_params(&self, seed: u64) -> ParamSet {
        let mut ps = ParamSet::new();
        self.stem.init(&mut ps, derive_seed(seed, "stem"));
        for (i, (d, s)) in self.downs.iter().zip(&self.stages).enumerate() {
            d.init(&mut ps, derive_seed(seed, &format!("down{i}")));
            s.init(&mut ps, derive_seed(seed, &format!("stage{i}")));
        }
        self.lat5.init(&mut ps, derive_seed(seed, "lat5"));
        self.csp4.init(&mut ps, derive_seed(seed, "csp4"));
        self.lat4.init(&mut ps, derive_seed(seed, "lat4"));
        self.csp3.init(&mut ps, derive_seed(seed, "csp3"));
        let prior = (self.cfg.objectness_prior / (1.0 - self.cfg.objectness_prior)).ln() as f32;
        for (i, h) in self.heads.iter().enumerate() {
            let hs = derive_seed(seed, &format!("head{i}"));
            h.stem.init(&mut ps, hs);
            h.bbox.init_scaled(&mut ps, hs, 0.1);
            h.obj.init_scaled(&mut ps, hs, 0.1);
            h.cls.init_scaled(&mut ps, hs, 0.1);
            ps.init_const(&h.obj.bias_name(), vec![1], prior);
        }
        if let Some(a) = &self.adapter {
            a.init_zero(&mut ps);
        }
        ps
    }

    /// Adds zero adapter weights to `params` if this detector has an adapter
    /// and they are missing.
    pub fn add_adapter(&self, params: &mut ParamSet) {
        if let Some(a) = &self.adapter {
            if !params.contains(&a.weight_name()) {
                a.init_zero(params);
            }
        }
    }

    pub fn adapter(&self) -> Option<&Conv2d> {
        self.adapter.as_ref()
    }

    /// Backbone outputs at strides 8, 16 and 32.
    fn backbone<T: Element>(&self, g: &mut Graph<T>, b: &Bindings, x: Var) -> Result<[Var; 3]> {
        let mut h = self.stem.forward(g, b, x)?;
        let mut outs = Vec::new();
        for (d, s) in self.downs.iter().zip(&self.stages) {
            h = d.forward(g, b, h)?;
            h = s.forward(g, b, h)?;
            outs.push(h);
        }
        Ok([outs[1], outs[2], outs[3]])
    }

    /// Top-down neck; branches at strides 8, 16 and 32.
    fn neck<T: Element>(&self, g: &mut Graph<T>, b: &Bindings, c: [Var; 3]) -> Result<[Var; 3]> {
        let p5 = self.lat5.forward(g, b, c[2])?;
        let up = g.upsample_nearest(p5, 2)?;
        let cat = g.concat_channels(&[up, c[1]])?;
        let p4 = self.csp4.forward(g, b, cat)?;
        let l4 = self.lat4.forward(g, b, p4)?;
        let up = g.upsample_nearest(l4, 2)?;
        let cat = g.concat_channels(&[up, c[0]])?;
        let p3 = self.csp3.forward(g, b, cat)?;
        Ok([p3, p4, p5])
    }

    /// `branch + Adapter(concat(branch, fused))`.
    fn inject<T: Element>(&self, g: &mut Graph<T>, b: &Bindings, branch: Var, fused: Var) -> Result<Var> {
        let adapter = self.adapter.as_ref().expect("checked by caller");
        let cat = g.concat_channels(&[branch, fused])?;
        let delta = adapter.forward(g, b, cat)?;
        Ok(g.add(branch, delta)?)
    }

    /// Raw predictions `[n, 5 + K, S/s, S/s]` for each stride in [`STRIDES`].
    /// Channels are box offsets (4), objectness (1) and class logits (K).
    pub fn forward<T: Element>(&self, g: &mut Graph<T>, b: &Bindings, x: Var, fused: Option<Var>) -> Result<[Var; 3]> {
        let (n, c, h, w) = g.value(x).dims4()?;
        let s = self.cfg.input_size;
        if (c, h, w) != (self.cfg.in_channels, s, s) {
            return Err(CoreError::Shape(format!(
                "detector input {:?}, expected [n, {}, {s}, {s}]",
                g.shape(x),
                self.cfg.in_channels
            )));
        }
        let c = self.backbone(g, b, x)?;
        let mut branches = self.neck(g, b, c)?;
        match (self.adapter.is_some(), fused) {
            (true, Some(f)) => {
                let want = self.cfg.fused_shape();
                if g.shape(f) != [n, want[0], want[1], want[2]] {
                    return Err(CoreError::Shape(format!("fused map {:?}, expected [{n}, {want:?}]", g.shape(f))));
                }
                let i = STRIDES.iter().position(|&x| x == self.cfg.injection.stride).expect("validated");
                branches[i] = self.inject(g, b, branches[i], f)?;
            }
            (true, None) => return invalid("injection is enabled but no fused features were given"),
            (false, Some(_)) => return invalid("fused features given to a detector without injection"),
            (false, None) => {}
        }
        let mut outs = Vec::with_capacity(3);
        for (h, &br) in self.heads.iter().zip(&branches) {
            let t = h.stem.forward(g, b, br)?;
            let bx = h.bbox.forward(g, b, t)?;
            let ob = h.obj.forward(g, b, t)?;
            let cl = h.cls.forward(g, b, t)?;
            outs.push(g.concat_channels(&[bx, ob, cl])?);
        }
        Ok([outs[0], outs[1], outs[2]])
    }
}

/// Per-image raw predictions, one `[5 + K, h, w]` tensor per stride.
#[derive(Clone, Debug, PartialEq)]
pub struct RawPredictions {
    pub levels: Vec<(usize, Tensor<f32>)>,
}

impl RawPredictions {
    /// Splits batched level outputs into per-image predictions.
    pub fn from_batch<T: Element>(levels: &[&Tensor<T>]) -> Result<Vec<Self>> {
        let n = levels.first().map(|t| t.shape()[0]).unwrap_or(0);
        let mut out = vec![RawPredictions { levels: Vec::new() }; n];
        for (&stride, t) in STRIDES.iter().zip(levels) {
            let (tn, c, h, w) = t.dims4()?;
            if tn != n {
                return Err(CoreError::Shape("levels disagree on batch size".into()));
            }
            for (i, item) in out.iter_mut().enumerate() {
                let data = t.item(i).iter().map(|v| v.to_f64_lossy() as f32).collect();
                item.levels.push((stride, Tensor::new(vec![c, h, w], data)?));
            }
        }
        Ok(out)
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.levels.len() == other.levels.len()
            && self.levels.iter().zip(&other.levels).all(|(a, b)| a.0 == b.0 && a.1.bit_eq(&b.1))
    }
}
