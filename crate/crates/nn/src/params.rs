use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::element::Element;
use crate::error::{shape_err, NnError, Result};
use crate::tensor::Tensor;

/// Mixes a seed with a string key into an independent 64-bit seed.
pub fn derive_seed(seed: u64, key: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(key.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T: Element = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> ParamSet<T> {
    pub fn new() -> Self {
        Self { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors.get(name).ok_or_else(|| NnError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors.get_mut(name).ok_or_else(|| NnError::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Element>(&self) -> ParamSet<U> {
        ParamSet { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Copies every tensor of `other` whose name exists here with the same shape.
    /// Returns the names that were copied.
    pub fn load_matching(&mut self, other: &ParamSet<T>) -> Result<Vec<String>> {
        let mut copied = Vec::new();
        for (name, src) in other.iter() {
            if let Some(dst) = self.tensors.get_mut(name) {
                if dst.shape() != src.shape() {
                    return shape_err(format!(
                        "parameter `{name}`: {:?} vs {:?}",
                        dst.shape(),
                        src.shape()
                    ));
                }
                *dst = src.clone();
                copied.push(name.to_string());
            }
        }
        Ok(copied)
    }

    /// `self + step * direction` over the union of names present in `direction`.
    pub fn perturbed(&self, direction: &ParamSet<T>, step: T) -> Result<ParamSet<T>> {
        let mut out = self.clone();
        for (name, d) in direction.iter() {
            let t = out.get_mut(name)?;
            let moved = t.zip_map(d, |a, b| a + step * b)?;
            *t = moved;
        }
        Ok(out)
    }
}

impl ParamSet<f32> {
    /// Normal(0, std) initialisation seeded by `(seed, name)`.
    pub fn init_normal(&mut self, seed: u64, name: &str, shape: Vec<usize>, std: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, name));
        let normal = Normal::new(0.0f64, std).expect("valid std");
        let t = Tensor::from_fn(shape, |_| normal.sample(&mut rng) as f32);
        self.insert(name, t);
    }

    pub fn init_const(&mut self, name: &str, shape: Vec<usize>, value: f32) {
        self.insert(name, Tensor::full(shape, value));
    }

    pub fn bitwise_eq(&self, other: &ParamSet<f32>) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, a), (kb, b))| ka == kb && a.bit_eq(b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_depends_only_on_seed_and_name() {
        let mut a = ParamSet::new();
        a.init_normal(3, "x.weight", vec![4], 1.0);
        a.init_normal(3, "y.weight", vec![4], 1.0);
        let mut b = ParamSet::new();
        b.init_normal(3, "y.weight", vec![4], 1.0);
        assert!(a.get("y.weight").unwrap().bit_eq(b.get("y.weight").unwrap()));
        assert!(!a.get("x.weight").unwrap().bit_eq(a.get("y.weight").unwrap()));
    }

    #[test]
    fn load_matching_rejects_shape_change() {
        let mut a = ParamSet::<f32>::new();
        a.init_const("w", vec![2], 0.0);
        let mut b = ParamSet::<f32>::new();
        b.init_const("w", vec![3], 1.0);
        assert!(a.load_matching(&b).is_err());
    }
}
