//! Minimal reverse-mode automatic differentiation over dense NCHW tensors.
//!
//! The engine is deliberately single-threaded: every reduction happens in a
//! fixed order, so identical inputs and weights give bit-identical outputs and
//! gradients. Models are written against [`Graph`] and are generic over the
//! [`Element`] type, which lets the same forward code run in `f64` for
//! finite-difference gradient checks.

mod container;
mod element;
mod error;
mod graph;
pub mod kernels;
pub mod layers;
mod optim;
mod params;
mod tensor;

pub use container::{stored_digest, write_atomic, Container};
pub use element::Element;
pub use error::{NnError, Result};
pub use graph::{Bindings, Grads, Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use params::{derive_seed, ParamSet};
pub use tensor::Tensor;
