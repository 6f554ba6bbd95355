use std::path::Path;

use diffyolo_nn::{derive_seed, Adam, AdamConfig, Container, Element, Graph, ParamSet, Tensor, Var};
use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{NoiseSchedule, ScheduleConfig, UNet, UNetConfig};
use crate::error::{invalid, CoreError, Result};
use crate::hashing::canonical_json;
use crate::image::{ImageTensor, ValueRange};
use crate::CHECKPOINT_MAGIC;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DdpmTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Size of the fixed validation batch.
    pub val_batch: usize,
    pub val_every: usize,
}

impl Default for DdpmTrainConfig {
    fn default() -> Self {
        Self { steps: 500, batch_size: 8, lr: 1e-3, val_batch: 8, val_every: 100 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DdpmTrainHistory {
    pub losses: Vec<f64>,
    pub val_steps: Vec<usize>,
    pub val_losses: Vec<f64>,
}

/// Mean squared error between predicted and true noise for a batch of clean
/// images `x0 [n, c, h, w]` (symmetric range), timesteps `t` and noise `eps`.
pub fn denoising_loss<T: Element>(
    net: &UNet,
    g: &mut Graph<T>,
    b: &diffyolo_nn::Bindings,
    x0: &Tensor<T>,
    t: &[usize],
    eps: &Tensor<T>,
    schedule: &NoiseSchedule,
) -> Result<Var> {
    let (n, c, h, w) = x0.dims4()?;
    if t.len() != n {
        return invalid(format!("{} timesteps for batch of {n}", t.len()));
    }
    x0.expect_same_shape(eps)?;
    let per = c * h * w;
    let mut xt = Vec::with_capacity(x0.numel());
    for (i, &ti) in t.iter().enumerate() {
        let ab = schedule.alpha_bar(ti)?;
        let (sa, sb) = (T::from_f64_lossy(ab.sqrt()), T::from_f64_lossy((1.0 - ab).sqrt()));
        let xs = &x0.data()[i * per..(i + 1) * per];
        let es = &eps.data()[i * per..(i + 1) * per];
        xt.extend(xs.iter().zip(es).map(|(&x, &e)| sa * x + sb * e));
    }
    let xt = g.constant(Tensor::new(vec![n, c, h, w], xt)?);
    let out = net.forward(g, b, xt, t, &[], true)?;
    let pred = out.eps.expect("full output");
    let target = g.constant(eps.clone());
    let diff = g.sub(pred, target)?;
    let sq = g.square(diff);
    Ok(g.mean(sq))
}

struct Batch {
    x0: Tensor<f32>,
    t: Vec<usize>,
    eps: Tensor<f32>,
}

fn draw_batch(images: &[Tensor<f32>], idx: &[usize], steps: usize, rng: &mut ChaCha8Rng) -> Result<Batch> {
    let items: Vec<Tensor<f32>> = idx.iter().map(|&i| images[i].clone()).collect();
    let x0 = Tensor::stack(&items)?;
    let t = idx.iter().map(|_| rng.random_range(1..=steps)).collect();
    let eps = Tensor::from_fn(x0.shape().to_vec(), |_| rng.sample::<f32, _>(StandardNormal));
    Ok(Batch { x0, t, eps })
}

fn batch_loss(net: &UNet, params: &ParamSet, batch: &Batch, schedule: &NoiseSchedule) -> Result<f64> {
    let mut g = Graph::new();
    let b = g.bind(params, |_| false);
    let l = denoising_loss(net, &mut g, &b, &batch.x0, &batch.t, &batch.eps, schedule)?;
    Ok(g.value(l).data()[0] as f64)
}

/// Trains the ε-prediction objective `E‖ε − ε_θ(x_t, t)‖²` with `t ~ U[1, T]`.
///
/// `images` are dataset images in `[0, 1]`; they are mapped to `[-1, 1]`.
/// Every random draw comes from `seed`.
pub fn train_denoiser(
    images: &[ImageTensor],
    schedule: &NoiseSchedule,
    cfg: &UNetConfig,
    opts: &DdpmTrainConfig,
    seed: u64,
) -> Result<(ParamSet, DdpmTrainHistory)> {
    if images.is_empty() {
        return invalid("denoiser training needs at least one image");
    }
    if opts.batch_size == 0 || opts.val_batch == 0 {
        return invalid("batch sizes must be positive");
    }
    let net = UNet::new(cfg)?;
    let expect = (cfg.in_channels, cfg.image_size, cfg.image_size);
    let data: Vec<Tensor<f32>> = images
        .iter()
        .map(|im| {
            if im.shape() != expect {
                return Err(CoreError::Shape(format!("image {:?}, U-Net expects {expect:?}", im.shape())));
            }
            Ok(im.to_range(ValueRange::Symmetric).into_tensor())
        })
        .collect::<Result<_>>()?;

    let mut params = net.init_params(derive_seed(seed, "ddpm-init"));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "ddpm-train"));
    let mut val_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "ddpm-val"));
    let val_idx: Vec<usize> = (0..opts.val_batch).map(|i| i % data.len()).collect();
    let val = draw_batch(&data, &val_idx, schedule.steps(), &mut val_rng)?;
    let mut adam = Adam::new(AdamConfig { lr: opts.lr, ..Default::default() });
    let mut history = DdpmTrainHistory::default();

    history.val_steps.push(0);
    history.val_losses.push(batch_loss(&net, &params, &val, schedule)?);
    for step in 0..opts.steps {
        let idx: Vec<usize> = (0..opts.batch_size).map(|_| rng.random_range(0..data.len())).collect();
        let batch = draw_batch(&data, &idx, schedule.steps(), &mut rng)?;
        let mut g = Graph::new();
        let b = g.bind(&params, |_| true);
        let loss = denoising_loss(&net, &mut g, &b, &batch.x0, &batch.t, &batch.eps, schedule)?;
        let lv = g.value(loss).data()[0] as f64;
        if !lv.is_finite() {
            return Err(CoreError::Divergence { step, loss: lv });
        }
        history.losses.push(lv);
        let grads = g.backward(loss)?;
        adam.step(&mut params, &grads.for_params(&b))?;
        let done = step + 1;
        if done % opts.val_every.max(1) == 0 || done == opts.steps {
            let vl = batch_loss(&net, &params, &val, schedule)?;
            debug!("ddpm step {done}: train {lv:.4} val {vl:.4}");
            history.val_steps.push(done);
            history.val_losses.push(vl);
        }
    }
    if let (Some(first), Some(last)) = (history.val_losses.first(), history.val_losses.last()) {
        info!("ddpm training: val loss {first:.4} -> {last:.4} over {} steps", opts.steps);
    }
    Ok((params, history))
}

/// A loaded diffusion checkpoint.
#[derive(Clone, Debug)]
pub struct DdpmCheckpoint {
    pub unet: UNetConfig,
    pub schedule: ScheduleConfig,
    pub params: ParamSet,
    /// Hex SHA-256 checksum of the file body.
    pub hash: String,
}

#[derive(Serialize, Deserialize)]
struct DdpmEcho {
    unet: UNetConfig,
    schedule: ScheduleConfig,
}

pub fn save_checkpoint(
    path: &Path,
    unet: &UNetConfig,
    schedule: &ScheduleConfig,
    params: &ParamSet,
    meta: serde_json::Value,
) -> Result<String> {
    let mut c = Container::new(CHECKPOINT_MAGIC, "ddpm").with_params(params);
    c.config = canonical_json(&DdpmEcho { unet: unet.clone(), schedule: schedule.clone() })?;
    c.meta = canonical_json(&json!({ "meta": meta }))?;
    Ok(c.write(path)?)
}

pub fn load_checkpoint(path: &Path) -> Result<DdpmCheckpoint> {
    let c = Container::read(path, CHECKPOINT_MAGIC)?;
    if c.kind != "ddpm" {
        return Err(CoreError::Checkpoint(format!("{} holds a `{}` checkpoint, not ddpm", path.display(), c.kind)));
    }
    let echo: DdpmEcho = serde_json::from_str(&c.config)?;
    let net = UNet::new(&echo.unet)?;
    let params = c.params();
    let expected = net.init_params(0);
    for (name, t) in expected.iter() {
        let got = params.get(name).map_err(|_| CoreError::Checkpoint(format!("missing parameter `{name}`")))?;
        if got.shape() != t.shape() {
            return Err(CoreError::Checkpoint(format!("parameter `{name}` has shape {:?}", got.shape())));
        }
    }
    Ok(DdpmCheckpoint { unet: echo.unet, schedule: echo.schedule, params, hash: c.digest() })
}
