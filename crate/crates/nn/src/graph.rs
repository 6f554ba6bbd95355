use std::collections::BTreeMap;

use crate::element::{matmul, Element};
use crate::error::{shape_err, NnError, Result};
use crate::kernels::{self, ConvGeometry};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Minimum(Var, Var),
    Maximum(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Square(Var),
    Exp(Var),
    Ln(Var),
    Sigmoid(Var),
    Silu(Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    Conv2d { x: Var, w: Var, geom: ConvGeometry },
    AddChannelBias { x: Var, b: Var },
    AddChannelVec { x: Var, v: Var },
    Linear { x: Var, w: Var },
    AddRowBias { x: Var, b: Var },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, means: Vec<T>, rstds: Vec<T> },
    Upsample { x: Var, factor: usize },
    Concat(Vec<Var>),
    Gather { x: Var, cells: Vec<(usize, usize, usize)> },
    Column { x: Var, col: usize },
    BceWithLogits { logits: Var, targets: Tensor<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of tensor operations, differentiated by [`Graph::backward`].
pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Parameter name → graph leaf.
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| NnError::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Gradients produced by one backward pass.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every bound parameter that received one.
    pub fn for_params(&self, bindings: &Bindings) -> BTreeMap<String, Tensor<T>> {
        bindings
            .iter()
            .filter_map(|(name, v)| self.get(v).map(|g| (name.to_string(), g.clone())))
            .collect()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Adds every parameter as a leaf; `trainable` decides which receive gradients.
    pub fn bind(&mut self, params: &ParamSet<T>, trainable: impl Fn(&str) -> bool) -> Bindings {
        let vars = params
            .iter()
            .map(|(name, t)| (name.to_string(), self.leaf(t.clone(), trainable(name))))
            .collect();
        Bindings { vars }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), f)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// Elementwise minimum; ties send the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Minimum(a, b), |x, y| if y < x { y } else { x })
    }

    /// Elementwise maximum; ties send the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Maximum(a, b), |x, y| if y > x { y } else { x })
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::from_f64_lossy(s);
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let s = T::from_f64_lossy(s);
        self.unary(a, Op::AddScalar(a), |x| x + s)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), |x| x.exp())
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln(a), |x| x.ln())
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Silu(a), |x| x * sigmoid(x))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = if t.numel() == 0 {
            T::zero()
        } else {
            t.sum() / T::from_f64_lossy(t.numel() as f64)
        };
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (n, in_c, in_h, in_w) = self.value(x).dims4()?;
        let (out_c, wc, kh, kw) = self.value(w).dims4()?;
        if wc != in_c || kh != kw {
            return shape_err(format!(
                "conv weight {:?} incompatible with input {:?}",
                self.shape(w),
                self.shape(x)
            ));
        }
        if in_h + 2 * pad < kh || in_w + 2 * pad < kw || stride == 0 {
            return shape_err(format!("conv kernel {kh} too large for input {in_h}x{in_w}"));
        }
        let geom = ConvGeometry { in_c, in_h, in_w, out_c, kernel: kh, stride, pad };
        let y = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), n, &geom);
        let value = Tensor::new(vec![n, out_c, geom.out_h(), geom.out_w()], y)?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(value, Op::Conv2d { x, w, geom }, rg))
    }

    /// Adds a per-channel bias `[c]` to an NCHW tensor.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.shape(b) != [c] {
            return shape_err(format!("bias {:?} for {c} channels", self.shape(b)));
        }
        let bias = self.value(b).data();
        let mut out = self.value(x).clone();
        for (i, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
            let bv = bias[i % c];
            plane.iter_mut().for_each(|v| *v = *v + bv);
        }
        debug_assert_eq!(out.numel(), n * c * h * w);
        let rg = self.rg(&[x, b]);
        Ok(self.push(out, Op::AddChannelBias { x, b }, rg))
    }

    /// Adds a per-sample, per-channel vector `[n, c]` to an NCHW tensor.
    pub fn add_channel_vec(&mut self, x: Var, v: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.shape(v) != [n, c] {
            return shape_err(format!("vector {:?} for input {:?}", self.shape(v), [n, c, h, w]));
        }
        let vec = self.value(v).data();
        let mut out = self.value(x).clone();
        for (i, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
            let bv = vec[i];
            plane.iter_mut().for_each(|v| *v = *v + bv);
        }
        let rg = self.rg(&[x, v]);
        Ok(self.push(out, Op::AddChannelVec { x, v }, rg))
    }

    /// `x [n, i] · wᵀ` with `w [o, i]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (n, i) = self.value(x).dims2()?;
        let (o, wi) = self.value(w).dims2()?;
        if wi != i {
            return shape_err(format!("linear weight {:?} for input {:?}", [o, wi], [n, i]));
        }
        let mut y = vec![T::zero(); n * o];
        matmul(self.value(x).data(), self.value(w).data(), &mut y, n, i, o, false, true, false);
        let rg = self.rg(&[x, w]);
        Ok(self.push(Tensor::new(vec![n, o], y)?, Op::Linear { x, w }, rg))
    }

    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, o) = self.value(x).dims2()?;
        if self.shape(b) != [o] {
            return shape_err(format!("bias {:?} for {o} columns", self.shape(b)));
        }
        let bias = self.value(b).data();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(o) {
            row.iter_mut().zip(bias).for_each(|(v, &bv)| *v = *v + bv);
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(out, Op::AddRowBias { x, b }, rg))
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if groups == 0 || c % groups != 0 {
            return shape_err(format!("{c} channels not divisible into {groups} groups"));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return shape_err("group norm affine parameters must be [c]");
        }
        let xs = self.value(x).data();
        let (means, rstds) = kernels::group_norm_stats(xs, n, c, h * w, groups, eps);
        let y = kernels::group_norm_forward(
            xs,
            self.value(gamma).data(),
            self.value(beta).data(),
            &means,
            &rstds,
            n,
            c,
            h * w,
            groups,
        );
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(vec![n, c, h, w], y)?,
            Op::GroupNorm { x, gamma, beta, groups, means, rstds },
            rg,
        ))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let y = kernels::upsample_nearest(self.value(x).data(), n * c, h, w, factor);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![n, c, h * factor, w * factor], y)?, Op::Upsample { x, factor }, rg))
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat of zero tensors");
        };
        let (n, _, h, w) = self.value(first).dims4()?;
        let mut total_c = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return shape_err(format!(
                    "concat mismatch {:?} vs {:?}",
                    self.shape(p),
                    self.shape(first)
                ));
            }
            total_c += pc;
        }
        let mut out = Vec::with_capacity(n * total_c * h * w);
        for b in 0..n {
            for &p in parts {
                out.extend_from_slice(self.value(p).item(b));
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(vec![n, total_c, h, w], out)?, Op::Concat(parts.to_vec()), rg))
    }

    /// Gathers the channel vectors at `(batch, y, x)` cells into a `[cells, c]` matrix.
    pub fn gather_cells(&mut self, x: Var, cells: &[(usize, usize, usize)]) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(cells.len() * c);
        for &(b, cy, cx) in cells {
            if b >= n || cy >= h || cx >= w {
                return shape_err(format!("cell {:?} outside {:?}", (b, cy, cx), [n, c, h, w]));
            }
            for ch in 0..c {
                out.push(xs[((b * c + ch) * h + cy) * w + cx]);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![cells.len(), c], out)?,
            Op::Gather { x, cells: cells.to_vec() },
            rg,
        ))
    }

    /// Column `col` of a `[rows, cols]` matrix as a `[rows]` vector.
    pub fn column(&mut self, x: Var, col: usize) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        if col >= cols {
            return shape_err(format!("column {col} of {cols}"));
        }
        let xs = self.value(x).data();
        let out: Vec<T> = (0..rows).map(|r| xs[r * cols + col]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![rows], out)?, Op::Column { x, col }, rg))
    }

    /// Elementwise binary cross-entropy of `logits` against fixed `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Tensor<T>) -> Result<Var> {
        let value = self.value(logits).zip_map(&targets, |x, y| {
            // max(x, 0) - x*y + ln(1 + e^{-|x|})
            let zero = T::zero();
            let pos = if x > zero { x } else { zero };
            pos - x * y + (-x.abs()).exp().ln_1p()
        })?;
        let rg = self.rg(&[logits]);
        Ok(self.push(value, Op::BceWithLogits { logits, targets }, rg))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).numel() != 1 {
            return shape_err(format!("backward needs a scalar, got {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &gout, &mut grads)?;
        }
        Ok(Grads { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match grads[v.0].as_mut() {
            Some(existing) => existing.add_assign(&g)?,
            None => grads[v.0] = Some(g),
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, idx: usize, gout: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gout.clone())?;
                self.accumulate(grads, *b, gout.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gout.clone())?;
                self.accumulate(grads, *b, gout.map(|g| -g))?;
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, gout.zip_map(self.value(*b), |g, y| g * y)?)?;
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, gout.zip_map(self.value(*a), |g, x| g * x)?)?;
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if self.wants(*a) {
                    self.accumulate(grads, *a, gout.zip_map(bv, |g, y| g / y)?)?;
                }
                if self.wants(*b) {
                    // d(a/b)/db = -(a/b)/b
                    let t = out.zip_map(bv, |q, y| q / y)?;
                    self.accumulate(grads, *b, gout.zip_map(&t, |g, v| -g * v)?)?;
                }
            }
            Op::Minimum(a, b) | Op::Maximum(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let is_min = matches!(node.op, Op::Minimum(..));
                let pick_b: Vec<bool> = av
                    .iter()
                    .zip(bv)
                    .map(|(x, y)| if is_min { y < x } else { y > x })
                    .collect();
                let route = |to_b: bool| {
                    let data = gout
                        .data()
                        .iter()
                        .zip(&pick_b)
                        .map(|(&g, &pb)| if pb == to_b { g } else { T::zero() })
                        .collect();
                    Tensor::new(gout.shape().to_vec(), data)
                };
                self.accumulate(grads, *a, route(false)?)?;
                self.accumulate(grads, *b, route(true)?)?;
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, gout.map(|g| g * s))?;
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, gout.clone())?,
            Op::Square(a) => {
                let two = T::from_f64_lossy(2.0);
                self.accumulate(grads, *a, gout.zip_map(self.value(*a), |g, x| g * two * x)?)?;
            }
            Op::Exp(a) => self.accumulate(grads, *a, gout.zip_map(out, |g, y| g * y)?)?,
            Op::Ln(a) => self.accumulate(grads, *a, gout.zip_map(self.value(*a), |g, x| g / x)?)?,
            Op::Sigmoid(a) => {
                self.accumulate(grads, *a, gout.zip_map(out, |g, s| g * s * (T::one() - s))?)?
            }
            Op::Silu(a) => {
                let d = gout.zip_map(self.value(*a), |g, x| {
                    let s = sigmoid(x);
                    g * s * (T::one() + x * (T::one() - s))
                })?;
                self.accumulate(grads, *a, d)?;
            }
            Op::Relu(a) => {
                let d = gout.zip_map(self.value(*a), |g, x| if x > T::zero() { g } else { T::zero() })?;
                self.accumulate(grads, *a, d)?;
            }
            Op::Sum(a) => {
                let g = gout.data()[0];
                self.accumulate(grads, *a, Tensor::full(self.shape(*a).to_vec(), g))?;
            }
            Op::Mean(a) => {
                let numel = self.value(*a).numel().max(1);
                let g = gout.data()[0] / T::from_f64_lossy(numel as f64);
                self.accumulate(grads, *a, Tensor::full(self.shape(*a).to_vec(), g))?;
            }
            Op::Conv2d { x, w, geom } => {
                let n = self.shape(*x)[0];
                let (dx, dw) = kernels::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    gout.data(),
                    n,
                    geom,
                    self.wants(*x),
                    self.wants(*w),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, Tensor::new(self.shape(*x).to_vec(), dx)?)?;
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, Tensor::new(self.shape(*w).to_vec(), dw)?)?;
                }
            }
            Op::AddChannelBias { x, b } => {
                self.accumulate(grads, *x, gout.clone())?;
                if self.wants(*b) {
                    let (_, c, h, w) = gout.dims4()?;
                    let mut db = vec![T::zero(); c];
                    for (i, plane) in gout.data().chunks(h * w).enumerate() {
                        db[i % c] = db[i % c] + plane.iter().fold(T::zero(), |a, &v| a + v);
                    }
                    self.accumulate(grads, *b, Tensor::new(vec![c], db)?)?;
                }
            }
            Op::AddChannelVec { x, v } => {
                self.accumulate(grads, *x, gout.clone())?;
                if self.wants(*v) {
                    let (n, c, h, w) = gout.dims4()?;
                    let dv: Vec<T> = gout
                        .data()
                        .chunks(h * w)
                        .map(|plane| plane.iter().fold(T::zero(), |a, &v| a + v))
                        .collect();
                    self.accumulate(grads, *v, Tensor::new(vec![n, c], dv)?)?;
                }
            }
            Op::Linear { x, w } => {
                let (n, i) = self.value(*x).dims2()?;
                let (o, _) = self.value(*w).dims2()?;
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); n * i];
                    matmul(gout.data(), self.value(*w).data(), &mut dx, n, o, i, false, false, false);
                    self.accumulate(grads, *x, Tensor::new(vec![n, i], dx)?)?;
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); o * i];
                    matmul(gout.data(), self.value(*x).data(), &mut dw, o, n, i, true, false, false);
                    self.accumulate(grads, *w, Tensor::new(vec![o, i], dw)?)?;
                }
            }
            Op::AddRowBias { x, b } => {
                self.accumulate(grads, *x, gout.clone())?;
                if self.wants(*b) {
                    let (_, o) = gout.dims2()?;
                    let mut db = vec![T::zero(); o];
                    for row in gout.data().chunks(o) {
                        db.iter_mut().zip(row).for_each(|(d, &g)| *d = *d + g);
                    }
                    self.accumulate(grads, *b, Tensor::new(vec![o], db)?)?;
                }
            }
            Op::GroupNorm { x, gamma, beta, groups, means, rstds } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let (dx, dgamma, dbeta) = kernels::group_norm_backward(
                    self.value(*x).data(),
                    self.value(*gamma).data(),
                    means,
                    rstds,
                    gout.data(),
                    n,
                    c,
                    h * w,
                    *groups,
                );
                self.accumulate(grads, *x, Tensor::new(vec![n, c, h, w], dx)?)?;
                self.accumulate(grads, *gamma, Tensor::new(vec![c], dgamma)?)?;
                self.accumulate(grads, *beta, Tensor::new(vec![c], dbeta)?)?;
            }
            Op::Upsample { x, factor } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let dx = kernels::upsample_nearest_backward(gout.data(), n * c, h, w, *factor);
                self.accumulate(grads, *x, Tensor::new(vec![n, c, h, w], dx)?)?;
            }
            Op::Concat(parts) => {
                let (n, total_c, h, w) = gout.dims4()?;
                let mut offset = 0;
                for &p in parts {
                    let pc = self.shape(p)[1];
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(n * pc * h * w);
                        for b in 0..n {
                            let start = (b * total_c + offset) * h * w;
                            d.extend_from_slice(&gout.data()[start..start + pc * h * w]);
                        }
                        self.accumulate(grads, p, Tensor::new(vec![n, pc, h, w], d)?)?;
                    }
                    offset += pc;
                }
            }
            Op::Gather { x, cells } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let mut dx = vec![T::zero(); n * c * h * w];
                for (row, &(b, cy, cx)) in cells.iter().enumerate() {
                    for ch in 0..c {
                        let d = &mut dx[((b * c + ch) * h + cy) * w + cx];
                        *d = *d + gout.data()[row * c + ch];
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vec![n, c, h, w], dx)?)?;
            }
            Op::Column { x, col } => {
                let (rows, cols) = self.value(*x).dims2()?;
                let mut dx = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    dx[r * cols + col] = gout.data()[r];
                }
                self.accumulate(grads, *x, Tensor::new(vec![rows, cols], dx)?)?;
            }
            Op::BceWithLogits { logits, targets } => {
                let d = self.value(*logits).zip_map(targets, |x, y| sigmoid(x) - y)?;
                self.accumulate(grads, *logits, gout.zip_map(&d, |g, v| g * v)?)?;
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], f: impl Fn(usize) -> f64) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), f)
    }

    /// Central-difference check of d(loss)/d(leaf) for a graph builder.
    fn check(
        inputs: Vec<Tensor<f64>>,
        build: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
    ) {
        let run = |vals: &[Tensor<f64>]| -> f64 {
            let mut g = Graph::new();
            let vs: Vec<Var> = vals.iter().map(|v| g.leaf(v.clone(), true)).collect();
            let l = build(&mut g, &vs);
            g.value(l).data()[0]
        };
        let mut g = Graph::new();
        let vs: Vec<Var> = inputs.iter().map(|v| g.leaf(v.clone(), true)).collect();
        let l = build(&mut g, &vs);
        let grads = g.backward(l).unwrap();
        let h = 1e-6;
        for (k, v) in vs.iter().enumerate() {
            let analytic = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape().to_vec()));
            for i in 0..inputs[k].numel() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.clone();
                minus[k].data_mut()[i] -= h;
                let fd = (run(&plus) - run(&minus)) / (2.0 * h);
                let an = analytic.data()[i];
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "input {k} elem {i}: fd {fd} analytic {an}"
                );
            }
        }
    }

    #[test]
    fn elementwise_ops_have_correct_gradients() {
        let a = t(&[5], |i| 0.3 + i as f64 * 0.41);
        let b = t(&[5], |i| 1.9 - i as f64 * 0.23);
        check(vec![a, b], |g, v| {
            let s = g.add(v[0], v[1]).unwrap();
            let d = g.sub(v[0], v[1]).unwrap();
            let m = g.mul(s, d).unwrap();
            let q = g.div(m, v[1]).unwrap();
            let mn = g.minimum(q, v[0]).unwrap();
            let mx = g.maximum(mn, v[1]).unwrap();
            let e = g.exp(mx);
            let sg = g.sigmoid(e);
            let si = g.silu(q);
            let sq = g.square(si);
            let r = g.relu(d);
            let lg = g.add_scalar(sg, 1.0);
            let ln = g.ln(lg);
            let z = g.add(ln, sq).unwrap();
            let z = g.add(z, r).unwrap();
            let z = g.scale(z, 0.7);
            g.mean(z)
        });
    }

    #[test]
    fn conv_norm_and_layout_ops_have_correct_gradients() {
        let x = t(&[2, 4, 4, 4], |i| ((i * 37) % 11) as f64 / 5.0 - 1.0);
        let w = t(&[4, 4, 3, 3], |i| ((i * 17) % 13) as f64 / 13.0 - 0.5);
        let b = t(&[4], |i| i as f64 * 0.1);
        let gamma = t(&[4], |i| 1.0 + i as f64 * 0.2);
        let beta = t(&[4], |i| -0.3 + i as f64 * 0.1);
        let vec = t(&[2, 4], |i| (i as f64 * 0.5).sin());
        check(vec![x, w, b, gamma, beta, vec], |g, v| {
            let y = g.conv2d(v[0], v[1], 2, 1).unwrap();
            let y = g.add_channel_bias(y, v[2]).unwrap();
            let y = g.group_norm(y, v[3], v[4], 2, 1e-5).unwrap();
            let y = g.add_channel_vec(y, v[5]).unwrap();
            let y = g.silu(y);
            let up = g.upsample_nearest(y, 2).unwrap();
            let cat = g.concat_channels(&[up, v[0]]).unwrap();
            let cells = g.gather_cells(cat, &[(0, 1, 2), (1, 3, 0), (0, 1, 2)]).unwrap();
            let c = g.column(cells, 5).unwrap();
            let s = g.square(cat);
            let s = g.mean(s);
            let c = g.sum(c);
            g.add(s, c).unwrap()
        });
    }

    #[test]
    fn linear_and_bce_have_correct_gradients() {
        let x = t(&[3, 4], |i| (i as f64 * 0.9).cos());
        let w = t(&[2, 4], |i| (i as f64 * 0.4).sin());
        let b = t(&[2], |i| i as f64 - 0.5);
        check(vec![x, w, b], |g, v| {
            let y = g.linear(v[0], v[1]).unwrap();
            let y = g.add_row_bias(y, v[2]).unwrap();
            let targets = Tensor::from_fn(vec![3, 2], |i| (i % 2) as f64);
            let l = g.bce_with_logits(y, targets).unwrap();
            g.mean(l)
        });
    }

    #[test]
    fn bce_at_zero_logit_is_ln2() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(vec![3]), true);
        let l = g.bce_with_logits(x, Tensor::zeros(vec![3])).unwrap();
        let m = g.mean(l);
        assert!((g.value(m).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut g = Graph::<f32>::new();
        let a = g.leaf(Tensor::ones(vec![2]), false);
        let b = g.leaf(Tensor::ones(vec![2]), true);
        let c = g.mul(a, b).unwrap();
        let l = g.sum(c);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, 1.0]);
    }
}
