//! Parameterised building blocks. Each layer owns only its name prefix and
//! hyper-parameters; tensors live in a [`ParamSet`] and are looked up through
//! graph [`Bindings`] at forward time.

use crate::element::Element;
use crate::error::Result;
use crate::graph::{Bindings, Graph, Var};
use crate::params::ParamSet;

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub name: String,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub bias: bool,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, in_c: usize, out_c: usize, kernel: usize, stride: usize) -> Self {
        Self { name: name.into(), in_c, out_c, kernel, stride, bias: true }
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    fn weight_shape(&self) -> Vec<usize> {
        vec![self.out_c, self.in_c, self.kernel, self.kernel]
    }

    /// He-normal weights, zero bias.
    pub fn init(&self, ps: &mut ParamSet, seed: u64) {
        let fan_in = (self.in_c * self.kernel * self.kernel) as f64;
        ps.init_normal(seed, &self.weight_name(), self.weight_shape(), (2.0 / fan_in).sqrt());
        if self.bias {
            ps.init_const(&self.bias_name(), vec![self.out_c], 0.0);
        }
    }

    pub fn init_scaled(&self, ps: &mut ParamSet, seed: u64, gain: f64) {
        let fan_in = (self.in_c * self.kernel * self.kernel) as f64;
        ps.init_normal(seed, &self.weight_name(), self.weight_shape(), gain / fan_in.sqrt());
        if self.bias {
            ps.init_const(&self.bias_name(), vec![self.out_c], 0.0);
        }
    }

    pub fn init_zero(&self, ps: &mut ParamSet) {
        ps.init_const(&self.weight_name(), self.weight_shape(), 0.0);
        if self.bias {
            ps.init_const(&self.bias_name(), vec![self.out_c], 0.0);
        }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, b: &Bindings, x: Var) -> Result<Var> {
        let w = b.get(&self.weight_name())?;
        let y = g.conv2d(x, w, self.stride, self.kernel / 2)?;
        if self.bias {
            g.add_channel_bias(y, b.get(&self.bias_name())?)
        } else {
            Ok(y)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub name: String,
    pub in_f: usize,
    pub out_f: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_f: usize, out_f: usize) -> Self {
        Self { name: name.into(), in_f, out_f }
    }

    pub fn init(&self, ps: &mut ParamSet, seed: u64) {
        let std = (1.0 / self.in_f as f64).sqrt();
        ps.init_normal(seed, &format!("{}.weight", self.name), vec![self.out_f, self.in_f], std);
        ps.init_const(&format!("{}.bias", self.name), vec![self.out_f], 0.0);
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, b: &Bindings, x: Var) -> Result<Var> {
        let y = g.linear(x, b.get(&format!("{}.weight", self.name))?)?;
        g.add_row_bias(y, b.get(&format!("{}.bias", self.name))?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupNorm {
    pub name: String,
    pub channels: usize,
    pub groups: usize,
}

impl GroupNorm {
    pub const EPS: f64 = 1e-5;

    /// Largest group count `<= max_groups` dividing `channels`.
    pub fn new(name: impl Into<String>, channels: usize, max_groups: usize) -> Self {
        let groups = (1..=max_groups.min(channels).max(1)).rev().find(|g| channels.is_multiple_of(*g)).unwrap_or(1);
        Self { name: name.into(), channels, groups }
    }

    pub fn init(&self, ps: &mut ParamSet) {
        ps.init_const(&format!("{}.weight", self.name), vec![self.channels], 1.0);
        ps.init_const(&format!("{}.bias", self.name), vec![self.channels], 0.0);
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, b: &Bindings, x: Var) -> Result<Var> {
        let gamma = b.get(&format!("{}.weight", self.name))?;
        let beta = b.get(&format!("{}.bias", self.name))?;
        g.group_norm(x, gamma, beta, self.groups, Self::EPS)
    }
}

/// Convolution → group norm → SiLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvNormAct {
    pub conv: Conv2d,
    pub norm: GroupNorm,
}

impl ConvNormAct {
    pub fn new(name: &str, in_c: usize, out_c: usize, kernel: usize, stride: usize, max_groups: usize) -> Self {
        Self {
            conv: Conv2d::new(format!("{name}.conv"), in_c, out_c, kernel, stride).without_bias(),
            norm: GroupNorm::new(format!("{name}.norm"), out_c, max_groups),
        }
    }

    pub fn init(&self, ps: &mut ParamSet, seed: u64) {
        self.conv.init(ps, seed);
        self.norm.init(ps);
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, b: &Bindings, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, b, x)?;
        let y = self.norm.forward(g, b, y)?;
        Ok(g.silu(y))
    }
}
