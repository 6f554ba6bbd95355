//! Seeded image corruptions for the robustness conditions: none, additive
//! Gaussian, salt-and-pepper and Poisson shot noise.

use std::fmt;
use std::str::FromStr;

use diffyolo_nn::derive_seed;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, CoreError, Result};
use crate::image::{ImageTensor, ValueRange};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Corruption {
    None,
    Gaussian { sigma: f64 },
    SaltPepper { amount: f64, salt_fraction: f64 },
    Poisson { peak: f64 },
}

impl Corruption {
    pub const DEFAULT_SIGMA: f64 = 0.1;
    pub const DEFAULT_AMOUNT: f64 = 0.05;
    pub const DEFAULT_SALT_FRACTION: f64 = 0.5;
    pub const DEFAULT_PEAK: f64 = 255.0;

    pub fn gaussian() -> Self {
        Corruption::Gaussian { sigma: Self::DEFAULT_SIGMA }
    }

    pub fn salt_pepper() -> Self {
        Corruption::SaltPepper { amount: Self::DEFAULT_AMOUNT, salt_fraction: Self::DEFAULT_SALT_FRACTION }
    }

    pub fn poisson() -> Self {
        Corruption::Poisson { peak: Self::DEFAULT_PEAK }
    }

    /// The four evaluation conditions with default severities.
    pub fn standard_sweep() -> Vec<Corruption> {
        vec![Corruption::None, Self::gaussian(), Self::salt_pepper(), Self::poisson()]
    }

    pub fn name(&self) -> &'static str {
        match self {
            Corruption::None => "none",
            Corruption::Gaussian { .. } => "gaussian",
            Corruption::SaltPepper { .. } => "salt_pepper",
            Corruption::Poisson { .. } => "poisson",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Corruption::None => Ok(()),
            Corruption::Gaussian { sigma } if sigma >= 0.0 && sigma.is_finite() => Ok(()),
            Corruption::Gaussian { sigma } => invalid(format!("gaussian sigma must be >= 0, got {sigma}")),
            Corruption::SaltPepper { amount, salt_fraction } => {
                if !(0.0..=1.0).contains(&amount) {
                    return invalid(format!("salt_pepper amount must be in [0, 1], got {amount}"));
                }
                if !(0.0..=1.0).contains(&salt_fraction) {
                    return invalid(format!("salt_pepper salt_fraction must be in [0, 1], got {salt_fraction}"));
                }
                Ok(())
            }
            Corruption::Poisson { peak } if peak > 0.0 && peak.is_finite() => Ok(()),
            Corruption::Poisson { peak } => invalid(format!("poisson peak must be > 0, got {peak}")),
        }
    }
}

/// A corruption together with the seed that drives it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    #[serde(flatten)]
    pub corruption: Corruption,
    #[serde(default)]
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(corruption: Corruption, seed: u64) -> Self {
        Self { corruption, seed }
    }

    pub fn none() -> Self {
        Self::new(Corruption::None, 0)
    }

    pub fn name(&self) -> &'static str {
        self.corruption.name()
    }

    /// Same corruption with a seed specific to one image.
    pub fn for_image(&self, image_id: &str) -> Self {
        Self { corruption: self.corruption.clone(), seed: derive_seed(self.seed, image_id) }
    }
}

impl fmt::Display for CorruptionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.corruption {
            Corruption::None => write!(f, "none"),
            Corruption::Gaussian { sigma } => write!(f, "gaussian:sigma={sigma},seed={}", self.seed),
            Corruption::SaltPepper { amount, salt_fraction } => {
                write!(f, "salt_pepper:amount={amount},salt_fraction={salt_fraction},seed={}", self.seed)
            }
            Corruption::Poisson { peak } => write!(f, "poisson:peak={peak},seed={}", self.seed),
        }
    }
}

/// Parses `kind[:key=value,...]`, e.g. `gaussian:sigma=0.2,seed=3`.
/// Missing parameters take their defaults.
impl FromStr for CorruptionSpec {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, rest) = s.split_once(':').unwrap_or((s, ""));
        let mut corruption = match kind.trim() {
            "none" | "clean" => Corruption::None,
            "gaussian" => Corruption::gaussian(),
            "salt_pepper" | "salt-pepper" | "sp" => Corruption::salt_pepper(),
            "poisson" => Corruption::poisson(),
            other => return invalid(format!("unknown noise kind `{other}`")),
        };
        let mut seed = 0;
        for kv in rest.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (k, v) = kv.split_once('=').ok_or_else(|| CoreError::Invalid(format!("expected key=value, got `{kv}`")))?;
            let num = |v: &str| v.parse::<f64>().map_err(|_| CoreError::Invalid(format!("bad number `{v}` for `{k}`")));
            match (&mut corruption, k) {
                (_, "seed") => seed = v.parse().map_err(|_| CoreError::Invalid(format!("bad seed `{v}`")))?,
                (Corruption::Gaussian { sigma }, "sigma") => *sigma = num(v)?,
                (Corruption::SaltPepper { amount, .. }, "amount") => *amount = num(v)?,
                (Corruption::SaltPepper { salt_fraction, .. }, "salt_fraction") => *salt_fraction = num(v)?,
                (Corruption::Poisson { peak }, "peak") => *peak = num(v)?,
                _ => return invalid(format!("parameter `{k}` not valid for `{kind}`")),
            }
        }
        corruption.validate()?;
        Ok(Self { corruption, seed })
    }
}

/// Applies `spec` to a `[0, 1]` image. The output stays in `[0, 1]` and is a
/// pure function of `(image, spec)`.
pub fn corrupt(image: &ImageTensor, spec: &CorruptionSpec) -> Result<ImageTensor> {
    spec.corruption.validate()?;
    if image.range() != ValueRange::Unit {
        return invalid("corruptions operate on [0, 1] images");
    }
    let (c, h, w) = image.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = image.data().to_vec();
    match spec.corruption {
        Corruption::None => return Ok(image.clone()),
        Corruption::Gaussian { sigma } => {
            if sigma == 0.0 {
                return Ok(image.clone());
            }
            let normal = Normal::new(0.0, sigma).map_err(|e| CoreError::Invalid(e.to_string()))?;
            for v in &mut out {
                *v = (*v as f64 + normal.sample(&mut rng)).clamp(0.0, 1.0) as f32;
            }
        }
        Corruption::SaltPepper { amount, salt_fraction } => {
            let plane = h * w;
            let count = (amount * plane as f64).floor() as usize;
            for pos in index::sample(&mut rng, plane, count).into_vec() {
                let value = if rng.random::<f64>() < salt_fraction { 1.0 } else { 0.0 };
                for ch in 0..c {
                    out[ch * plane + pos] = value;
                }
            }
        }
        Corruption::Poisson { peak } => {
            for v in &mut out {
                let lambda = *v as f64 * peak;
                let k = if lambda > 0.0 {
                    Poisson::new(lambda).map_err(|e| CoreError::Invalid(e.to_string()))?.sample(&mut rng)
                } else {
                    0.0
                };
                *v = (k / peak).clamp(0.0, 1.0) as f32;
            }
        }
    }
    ImageTensor::new(c, h, w, out, ValueRange::Unit)
}

/// Peak signal-to-noise ratio in dB for `[0, 1]` images; infinite when equal.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    a.same_shape(b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.data().len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / mse).log10() })
}
