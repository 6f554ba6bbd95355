use rand::Rng;
use rand_distr::StandardNormal;

use super::NoiseSchedule;
use crate::error::Result;
use crate::image::{ImageTensor, ValueRange};

/// Draws an image-shaped tensor of independent standard normal values.
pub fn standard_normal<R: Rng>(rng: &mut R, channels: usize, height: usize, width: usize) -> ImageTensor {
    let data = (0..channels * height * width).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    ImageTensor::new(channels, height, width, data, ValueRange::Symmetric).expect("finite normals")
}

fn affine(a: &ImageTensor, ca: f64, b: &ImageTensor, cb: f64) -> Result<ImageTensor> {
    a.same_shape(b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &e)| (ca * x as f64 + cb * e as f64) as f32)
        .collect();
    let (c, h, w) = a.shape();
    ImageTensor::new(c, h, w, data, a.range())
}

/// One Markov noising step with an explicit β: `√(1−β)·x + √β·ε`.
pub fn q_step_with_beta(x_prev: &ImageTensor, beta: f64, eps: &ImageTensor) -> Result<ImageTensor> {
    affine(x_prev, (1.0 - beta).sqrt(), eps, beta.sqrt())
}

/// `x_t` from `x_{t-1}` at timestep `t` (1-based).
pub fn q_step(x_prev: &ImageTensor, t: usize, eps: &ImageTensor, schedule: &NoiseSchedule) -> Result<ImageTensor> {
    q_step_with_beta(x_prev, schedule.beta(t)?, eps)
}

/// Closed-form marginal with an explicit ᾱ: `√ᾱ·x0 + √(1−ᾱ)·ε`.
pub fn q_sample_with_alpha_bar(x0: &ImageTensor, alpha_bar: f64, eps: &ImageTensor) -> Result<ImageTensor> {
    affine(x0, alpha_bar.sqrt(), eps, (1.0 - alpha_bar).sqrt())
}

/// `x_t` drawn directly from `x_0` at timestep `t` (1-based).
pub fn q_sample(x0: &ImageTensor, t: usize, eps: &ImageTensor, schedule: &NoiseSchedule) -> Result<ImageTensor> {
    q_sample_with_alpha_bar(x0, schedule.alpha_bar(t)?, eps)
}
