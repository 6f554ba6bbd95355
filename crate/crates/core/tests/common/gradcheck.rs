//! Directional finite-difference gradient checks in f64.

use diffyolo_core::detector::{detection_loss, Detector, DetectorConfig, InjectionConfig, LossWeights};
use diffyolo_core::data::{BBox, GroundTruthBox};
use diffyolo_core::ddpm::{denoising_loss, NoiseSchedule, UNet, UNetConfig};
use diffyolo_nn::{Graph, ParamSet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn random_like(p: &ParamSet<f64>, rng: &mut ChaCha8Rng, std: f64) -> ParamSet<f64> {
    let mut out = ParamSet::new();
    for (name, t) in p.iter() {
        out.insert(name, Tensor::from_fn(t.shape().to_vec(), |_| std * rng.sample::<f64, _>(StandardNormal)));
    }
    out
}

/// Relative errors between `Σ ∇L·d` and the central difference of `L`
/// along `directions` random unit-scale directions.
pub fn directional_errors(
    params: &ParamSet<f64>,
    directions: usize,
    seed: u64,
    loss: impl Fn(&ParamSet<f64>, bool) -> (f64, Option<std::collections::BTreeMap<String, Tensor<f64>>>),
) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (_, grads) = loss(params, true);
    let grads = grads.expect("gradients requested");
    let h = 1e-5;
    (0..directions)
        .map(|_| {
            let d = random_like(params, &mut rng, 1.0);
            let analytic: f64 = d
                .iter()
                .map(|(name, dt)| grads.get(name).map_or(0.0, |g| g.data().iter().zip(dt.data()).map(|(a, b)| a * b).sum()))
                .sum();
            let plus = loss(&params.perturbed(&d, h).unwrap(), false).0;
            let minus = loss(&params.perturbed(&d, -h).unwrap(), false).0;
            let numeric = (plus - minus) / (2.0 * h);
            (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
        })
        .collect()
}

pub fn tiny_unet() -> UNetConfig {
    UNetConfig {
        in_channels: 1,
        image_size: 8,
        base_channels: 2,
        channel_multipliers: vec![1, 1],
        time_embed_dim: 2,
        tap_levels: vec![1],
        max_groups: 1,
    }
}

/// Worst relative error of the ε-MSE gradient over `directions` directions,
/// plus the parameter count.
pub fn unet_gradient_check(directions: usize) -> (f64, usize) {
    let cfg = tiny_unet();
    let net = UNet::new(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let base = net.init_params(1).cast::<f64>();
    // the output head starts at zero; move off that point so every layer has gradient
    let params = base.perturbed(&random_like(&base, &mut rng, 0.2), 1.0).unwrap();
    let schedule = NoiseSchedule::linear(20, 1e-4, 0.02).unwrap();
    let x0 = Tensor::from_fn(vec![2, 1, 8, 8], |_| rng.random_range(-1.0..1.0));
    let eps = Tensor::from_fn(vec![2, 1, 8, 8], |_| rng.sample::<f64, _>(StandardNormal));
    let t = [3, 17];
    let errs = directional_errors(&params, directions, 11, |p, want| {
        let mut g = Graph::<f64>::new();
        let b = g.bind(p, |_| want);
        let l = denoising_loss(&net, &mut g, &b, &x0, &t, &eps, &schedule).unwrap();
        let v = g.value(l).data()[0];
        (v, want.then(|| g.backward(l).unwrap().for_params(&b)))
    });
    (errs.into_iter().fold(0.0, f64::max), params.num_scalars())
}

pub fn tiny_detector() -> DetectorConfig {
    DetectorConfig {
        input_size: 32,
        in_channels: 1,
        num_classes: 2,
        stem_channels: 2,
        backbone_channels: [4, 4, 4],
        neck_channels: [4, 4, 4],
        max_groups: 2,
        objectness_prior: 0.1,
        injection: InjectionConfig { enabled: true, stride: 8, fused_channels: 2 },
    }
}

/// Same for the detection loss on a miniature detector with a live adapter.
pub fn detector_gradient_check(directions: usize) -> (f64, usize) {
    let cfg = tiny_detector();
    let det = Detector::new(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let base = det.init_params(2).cast::<f64>();
    let params = base.perturbed(&random_like(&base, &mut rng, 0.1), 1.0).unwrap();
    let x = Tensor::from_fn(vec![2, 1, 32, 32], |_| rng.random_range(-1.0..1.0));
    let fused = Tensor::from_fn(vec![2, 2, 4, 4], |_| rng.random_range(-1.0..1.0));
    let gt = |x1, y1, x2, y2, class| GroundTruthBox { bbox: BBox::new(x1, y1, x2, y2), class };
    let truth = vec![vec![gt(3.0, 4.0, 11.0, 9.0, 0), gt(14.0, 10.0, 30.0, 31.0, 1)], vec![gt(20.0, 2.0, 25.0, 12.0, 1)]];
    let errs = directional_errors(&params, directions, 12, |p, want| {
        let mut g = Graph::<f64>::new();
        let b = g.bind(p, |_| want);
        let xv = g.constant(x.clone());
        let fv = g.constant(fused.clone());
        let outs = det.forward(&mut g, &b, xv, Some(fv)).unwrap();
        let (l, _) = detection_loss(&mut g, &outs, &truth, 32, 2, &LossWeights::default()).unwrap();
        let v = g.value(l.total).data()[0];
        (v, want.then(|| g.backward(l.total).unwrap().for_params(&b)))
    });
    (errs.into_iter().fold(0.0, f64::max), params.num_scalars())
}
