//! Tape-based reverse-mode autodiff.
//!
//! A [`Graph`] records every op of one forward pass. Parameters live outside the
//! tape in a [`ParamStore`]; the tape only copies the (possibly sliced) blocks it
//! reads, and [`Graph::backward`] adds gradients back into the matching block of
//! the store's grad buffers. Gradients accumulate across backward calls until
//! [`ParamStore::zero_grad`].

use std::collections::BTreeMap;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::tensor::{conv2d_backward, conv2d_forward, gemm_acc, gemm_nt_acc, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Named parameter tensors plus one gradient buffer per parameter.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Scalar = f32> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    grads: Vec<Tensor<T>>,
    index: BTreeMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter {name}")));
        }
        let id = ParamId(self.values.len());
        self.grads.push(Tensor::zeros(value.shape().to_vec()));
        self.values.push(value);
        self.index.insert(name.clone(), id);
        self.names.push(name);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Parameters in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| g.fill(T::zero()));
    }

    /// Adds another store's gradients into this one. Addition is the only merge
    /// operation, so independent tapes can be reduced in any order.
    pub fn merge_grads(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.names != self.names {
            return Err(Error::Invalid("merge_grads: parameter sets differ".into()));
        }
        for (g, o) in self.grads.iter_mut().zip(&other.grads) {
            g.add_assign(o)?;
        }
        Ok(())
    }

    pub fn grads_snapshot(&self) -> Vec<Tensor<T>> {
        self.grads.clone()
    }

    pub fn num_values(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            grads: self.grads.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    pub(crate) fn grad_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.grads[id.0]
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Where batch normalization takes its statistics from.
#[derive(Clone, Debug)]
pub enum NormStats<'a, T> {
    /// Current mini-batch (training / calibration).
    Batch,
    /// Stored per-channel mean and variance (evaluation).
    Stored { mean: &'a [T], var: &'a [T] },
}

/// Per-channel mean and biased variance of one batch-norm input.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMoments<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param {
        id: ParamId,
        rows: Range<usize>,
        cols: Option<Range<usize>>,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
        groups: usize,
    },
    ChannelBias {
        input: Var,
        bias: Var,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch: bool,
    },
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Square(Var),
    Ln(Var),
    ClampMin(Var, T),
    Sum(Var),
    GlobalAvgPool(Var),
    Linear {
        input: Var,
        weight: Var,
    },
    Softmax(Var),
    PadColumns {
        input: Var,
        offset: usize,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// One forward pass worth of recorded ops.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    consumed: bool,
    check_finite: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
            check_finite: false,
        }
    }

    /// Fail any op whose output contains NaN or infinity.
    pub fn with_finite_check(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool, name: &'static str) -> Result<Var> {
        if self.consumed {
            return Err(Error::Graph("graph already differentiated; start a fresh forward".into()));
        }
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false, "constant")
            .expect("constant on a fresh graph")
    }

    /// A copy of `v`'s value with no gradient path back to it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        let value = store.get(id).clone();
        let rows = 0..value.shape()[0];
        self.push(value, Op::Param { id, rows, cols: None }, true, "param")
    }

    /// A rows x cols block of a parameter (leading two dims).
    pub fn param_block(
        &mut self,
        store: &ParamStore<T>,
        id: ParamId,
        rows: Range<usize>,
        cols: Option<Range<usize>>,
    ) -> Result<Var> {
        let value = store.get(id).block(rows.clone(), cols.clone())?;
        self.push(value, Op::Param { id, rows, cols }, true, "param")
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize, groups: usize) -> Result<Var> {
        let out = conv2d_forward(self.value(input), self.value(kernel), stride, padding, groups)?;
        let ng = self.ng(&[input, kernel]);
        self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
                groups,
            },
            ng,
            "conv2d",
        )
    }

    /// Adds a per-channel bias to a `[B, C, ...]` tensor.
    pub fn channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let x = self.value(input);
        let b = self.value(bias);
        if x.rank() < 2 || b.rank() != 1 || b.numel() != x.shape()[1] {
            return Err(Error::shape("channel_bias", x.shape(), b.shape()));
        }
        let c = x.shape()[1];
        let inner: usize = x.shape()[2..].iter().product();
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += b.data()[(i / inner) % c];
        }
        let ng = self.ng(&[input, bias]);
        self.push(out, Op::ChannelBias { input, bias }, ng, "channel_bias")
    }

    /// Batch normalization over `[B, C, H, W]`. Returns the batch moments when
    /// running on mini-batch statistics.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_, T>,
        eps: T,
    ) -> Result<(Var, Option<BatchMoments<T>>)> {
        let x = self.value(input);
        let [b, c, h, w] = x.dims4("batch_norm")?;
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.numel() != c || bv.numel() != c {
            return Err(Error::shape("batch_norm", x.shape(), gv.shape()));
        }
        let hw = h * w;
        let m = b * hw;
        let (mean, var, moments) = match stats {
            NormStats::Batch => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for bi in 0..b {
                        let base = (bi * c + ch) * hw;
                        s += x.data()[base..base + hw].iter().copied().sum::<T>();
                    }
                    let mu = s / T::lit(m as f64);
                    let mut v = T::zero();
                    for bi in 0..b {
                        let base = (bi * c + ch) * hw;
                        for &xv in &x.data()[base..base + hw] {
                            v += (xv - mu) * (xv - mu);
                        }
                    }
                    mean[ch] = mu;
                    var[ch] = v / T::lit(m as f64);
                }
                let moments = BatchMoments {
                    mean: mean.clone(),
                    var: var.clone(),
                    count: m,
                };
                (mean, var, Some(moments))
            }
            NormStats::Stored { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batch_norm stored stats", x.shape(), &[mean.len()]));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); x.numel()];
        let mut out = Tensor::zeros(x.shape().to_vec());
        for (i, (&xv, (xh, o))) in x
            .data()
            .iter()
            .zip(xhat.iter_mut().zip(out.data_mut()))
            .enumerate()
        {
            let ch = (i / hw) % c;
            *xh = (xv - mean[ch]) * inv_std[ch];
            *o = gv.data()[ch] * *xh + bv.data()[ch];
        }
        let ng = self.ng(&[input, gamma, beta]);
        let var = self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch: moments.is_some(),
            },
            ng,
            "batch_norm",
        )?;
        Ok((var, moments))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| if v > T::zero() { v } else { T::zero() });
        let ng = self.ng(&[a]);
        self.push(out, Op::Relu(a), ng, "relu")
    }

    fn zip_with(&self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape(op, x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "add", |p, q| p + q)?;
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Add(a, b), ng, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "sub", |p, q| p - q)?;
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Sub(a, b), ng, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "mul", |p, q| p * q)?;
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Mul(a, b), ng, "mul")
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.value(a).map(|v| v * s);
        let ng = self.ng(&[a]);
        self.push(out, Op::Scale(a, s), ng, "scale")
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v * v);
        let ng = self.ng(&[a]);
        self.push(out, Op::Square(a), ng, "square")
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(T::ln);
        let ng = self.ng(&[a]);
        self.push(out, Op::Ln(a), ng, "ln")
    }

    pub fn clamp_min(&mut self, a: Var, min: T) -> Result<Var> {
        let out = self.value(a).map(|v| if v.is_nan() { v } else { v.max(min) });
        let ng = self.ng(&[a]);
        self.push(out, Op::ClampMin(a, min), ng, "clamp_min")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(&[a]);
        self.push(out, Op::Sum(a), ng, "sum")
    }

    /// `[B, C, H, W] -> [B, C]`
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let [b, c, h, w] = x.dims4("global_avg_pool")?;
        let hw = h * w;
        let denom = T::lit(hw as f64);
        let data = x
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().copied().sum::<T>() / denom)
            .collect();
        let out = Tensor::new([b, c], data)?;
        let ng = self.ng(&[a]);
        self.push(out, Op::GlobalAvgPool(a), ng, "global_avg_pool")
    }

    /// `[B, N] x [C, N]^T -> [B, C]`, no bias.
    pub fn linear(&mut self, input: Var, weight: Var) -> Result<Var> {
        let (x, wt) = (self.value(input), self.value(weight));
        let [b, n] = x.dims2("linear")?;
        let [c, n2] = wt.dims2("linear")?;
        if n != n2 {
            return Err(Error::shape("linear", x.shape(), wt.shape()));
        }
        let mut out = Tensor::zeros([b, c]);
        gemm_nt_acc(b, c, n, x.data(), wt.data(), out.data_mut());
        let ng = self.ng(&[input, weight]);
        self.push(out, Op::Linear { input, weight }, ng, "linear")
    }

    /// Row-wise softmax of a `[B, C]` tensor.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let [_, c] = x.dims2("softmax")?;
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(c) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        let ng = self.ng(&[a]);
        self.push(out, Op::Softmax(a), ng, "softmax")
    }

    /// Places the columns of a `[B, n]` tensor at `offset..offset + n` of a
    /// zero `[B, full]` tensor.
    pub fn pad_columns(&mut self, input: Var, offset: usize, full: usize) -> Result<Var> {
        let x = self.value(input);
        let [b, n] = x.dims2("pad_columns")?;
        if offset + n > full {
            return Err(Error::shape("pad_columns", x.shape(), &[b, full]));
        }
        let mut out = Tensor::zeros([b, full]);
        out.set_block(0..b, Some(offset..offset + n), x)?;
        let ng = self.ng(&[input]);
        self.push(out, Op::PadColumns { input, offset }, ng, "pad_columns")
    }

    /// Back-propagates from a scalar `loss`, adding parameter gradients into
    /// `store`. A graph can be differentiated once.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        if self.consumed {
            return Err(Error::Graph("backward called twice on the same graph".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param { id, rows, cols } => {
                    store.grad_mut(*id).add_block(rows.clone(), cols.clone(), &gy)?;
                }
                Op::Conv2d {
                    input,
                    kernel,
                    stride,
                    padding,
                    groups,
                } => {
                    let (gx, gw) = conv2d_backward(
                        self.value(*input),
                        self.value(*kernel),
                        &gy,
                        *stride,
                        *padding,
                        *groups,
                        self.requires_grad(*input),
                        self.requires_grad(*kernel),
                    )?;
                    accumulate(&mut grads, *input, gx)?;
                    accumulate(&mut grads, *kernel, gw)?;
                }
                Op::ChannelBias { input, bias } => {
                    let c = self.value(*bias).numel();
                    let inner: usize = gy.shape()[2..].iter().product();
                    let mut gb = Tensor::zeros([c]);
                    for (k, &v) in gy.data().iter().enumerate() {
                        gb.data_mut()[(k / inner) % c] += v;
                    }
                    accumulate(&mut grads, *bias, Some(gb))?;
                    accumulate(&mut grads, *input, Some(gy))?;
                }
                Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch,
                } => {
                    let [b, c, h, w] = gy.dims4("batch_norm backward")?;
                    let hw = h * w;
                    let m = T::lit((b * hw) as f64);
                    let gv = self.value(*gamma).data();
                    let mut dgamma = vec![T::zero(); c];
                    let mut dbeta = vec![T::zero(); c];
                    for (k, (&g, &xh)) in gy.data().iter().zip(xhat).enumerate() {
                        let ch = (k / hw) % c;
                        dgamma[ch] += g * xh;
                        dbeta[ch] += g;
                    }
                    let mut dx = Tensor::zeros(gy.shape().to_vec());
                    for (k, (o, (&g, &xh))) in dx
                        .data_mut()
                        .iter_mut()
                        .zip(gy.data().iter().zip(xhat))
                        .enumerate()
                    {
                        let ch = (k / hw) % c;
                        *o = if *batch {
                            gv[ch] * inv_std[ch] / m * (m * g - dbeta[ch] - xh * dgamma[ch])
                        } else {
                            gv[ch] * inv_std[ch] * g
                        };
                    }
                    accumulate(&mut grads, *input, Some(dx))?;
                    accumulate(&mut grads, *gamma, Some(Tensor::new([c], dgamma)?))?;
                    accumulate(&mut grads, *beta, Some(Tensor::new([c], dbeta)?))?;
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let mut d = gy;
                    for (g, &xv) in d.data_mut().iter_mut().zip(x.data()) {
                        if xv <= T::zero() {
                            *g = T::zero();
                        }
                    }
                    accumulate(&mut grads, *a, Some(d))?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, Some(gy.clone()))?;
                    accumulate(&mut grads, *b, Some(gy))?;
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, Some(gy.map(|v| -v)))?;
                    accumulate(&mut grads, *a, Some(gy))?;
                }
                Op::Mul(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let da = zip(&gy, y, |g, q| g * q)?;
                    let db = zip(&gy, x, |g, p| g * p)?;
                    accumulate(&mut grads, *a, Some(da))?;
                    accumulate(&mut grads, *b, Some(db))?;
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    accumulate(&mut grads, *a, Some(gy.map(|g| g * s)))?;
                }
                Op::Square(a) => {
                    let d = zip(&gy, self.value(*a), |g, x| g * (x + x))?;
                    accumulate(&mut grads, *a, Some(d))?;
                }
                Op::Ln(a) => {
                    let d = zip(&gy, self.value(*a), |g, x| g / x)?;
                    accumulate(&mut grads, *a, Some(d))?;
                }
                Op::ClampMin(a, min) => {
                    let min = *min;
                    let d = zip(&gy, self.value(*a), |g, x| if x >= min { g } else { T::zero() })?;
                    accumulate(&mut grads, *a, Some(d))?;
                }
                Op::Sum(a) => {
                    let g = gy.data()[0];
                    let shape = self.value(*a).shape().to_vec();
                    accumulate(&mut grads, *a, Some(Tensor::full(shape, g)))?;
                }
                Op::GlobalAvgPool(a) => {
                    let x = self.value(*a);
                    let [_, _, h, w] = x.dims4("global_avg_pool backward")?;
                    let hw = h * w;
                    let denom = T::lit(hw as f64);
                    let data = gy
                        .data()
                        .iter()
                        .flat_map(|&g| std::iter::repeat_n(g / denom, hw))
                        .collect();
                    accumulate(&mut grads, *a, Some(Tensor::new(x.shape().to_vec(), data)?))?;
                }
                Op::Linear { input, weight } => {
                    let (x, wt) = (self.value(*input), self.value(*weight));
                    let [b, n] = x.dims2("linear backward")?;
                    let c = wt.shape()[0];
                    if self.requires_grad(*input) {
                        let mut dx = Tensor::zeros([b, n]);
                        gemm_acc(b, n, c, gy.data(), wt.data(), dx.data_mut());
                        accumulate(&mut grads, *input, Some(dx))?;
                    }
                    if self.requires_grad(*weight) {
                        let mut dw = Tensor::zeros([c, n]);
                        // dW[c, n] = sum_b gy[b, c] * x[b, n]
                        for bi in 0..b {
                            for ci in 0..c {
                                let g = gy.data()[bi * c + ci];
                                let row = &mut dw.data_mut()[ci * n..(ci + 1) * n];
                                for (d, &xv) in row.iter_mut().zip(&x.data()[bi * n..(bi + 1) * n]) {
                                    *d += g * xv;
                                }
                            }
                        }
                        accumulate(&mut grads, *weight, Some(dw))?;
                    }
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let c = y.shape()[1];
                    let mut d = Tensor::zeros(y.shape().to_vec());
                    for ((drow, yrow), grow) in d
                        .data_mut()
                        .chunks_mut(c)
                        .zip(y.data().chunks(c))
                        .zip(gy.data().chunks(c))
                    {
                        let dot: T = yrow.iter().zip(grow).map(|(&p, &g)| p * g).sum();
                        for ((o, &p), &g) in drow.iter_mut().zip(yrow).zip(grow) {
                            *o = p * (g - dot);
                        }
                    }
                    accumulate(&mut grads, *a, Some(d))?;
                }
                Op::PadColumns { input, offset } => {
                    let x = self.value(*input);
                    let [b, n] = x.dims2("pad_columns backward")?;
                    let d = gy.block(0..b, Some(*offset..*offset + n))?;
                    accumulate(&mut grads, *input, Some(d))?;
                }
            }
        }
        Ok(())
    }
}

fn zip<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape("backward", a.shape(), b.shape()));
    }
    let data = a.data().iter().zip(b.data()).map(|(&p, &q)| f(p, q)).collect();
    Tensor::new(a.shape().to_vec(), data)
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Option<Tensor<T>>) -> Result<()> {
    let Some(g) = g else { return Ok(()) };
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot => {
            *slot = Some(g);
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[f64]) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::new([values.len()], values.to_vec()).unwrap()).unwrap();
        (s, id)
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let (mut store, id) = store_with(&[0.3, -1.0, 2.0]);
        let mut g = Graph::new();
        let w = g.param(&store, id).unwrap();
        let l = g.sum(w).unwrap();
        g.backward(l, &mut store).unwrap();
        assert_eq!(store.grad(id).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_half_sum_squares() {
        let (mut store, id) = store_with(&[1.0, 2.0, 3.0]);
        let mut g = Graph::new();
        let w = g.param(&store, id).unwrap();
        let sq = g.square(w).unwrap();
        let s = g.sum(sq).unwrap();
        let l = g.scale(s, 0.5).unwrap();
        g.backward(l, &mut store).unwrap();
        assert_eq!(store.grad(id).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let (mut store, id) = store_with(&[1.0]);
        let mut g = Graph::new();
        let w = g.param(&store, id).unwrap();
        let l = g.sum(w).unwrap();
        g.backward(l, &mut store).unwrap();
        assert!(matches!(g.backward(l, &mut store), Err(Error::Graph(_))));
        assert!(g.sum(w).is_err());
    }

    #[test]
    fn non_scalar_loss_is_an_error() {
        let (mut store, id) = store_with(&[1.0, 2.0]);
        let mut g = Graph::new();
        let w = g.param(&store, id).unwrap();
        assert!(matches!(g.backward(w, &mut store), Err(Error::Graph(_))));
    }

    #[test]
    fn gradients_accumulate_across_backward_calls() {
        let (mut store, id) = store_with(&[1.0, 2.0]);
        for _ in 0..2 {
            let mut g = Graph::new();
            let w = g.param(&store, id).unwrap();
            let l = g.sum(w).unwrap();
            g.backward(l, &mut store).unwrap();
        }
        assert_eq!(store.grad(id).data(), &[2.0, 2.0]);
        store.zero_grad();
        assert_eq!(store.grad(id).data(), &[0.0, 0.0]);
    }

    #[test]
    fn detached_values_get_no_gradient() {
        let (mut store, id) = store_with(&[1.0, 2.0]);
        let mut g = Graph::new();
        let w = g.param(&store, id).unwrap();
        let d = g.detach(w);
        let p = g.mul(w, d).unwrap();
        let l = g.sum(p).unwrap();
        g.backward(l, &mut store).unwrap();
        // d/dw (w * stop(w)) = stop(w)
        assert_eq!(store.grad(id).data(), &[1.0, 2.0]);
    }

    #[test]
    fn finite_check_flags_nan() {
        let mut g = Graph::<f32>::new().with_finite_check(true);
        let x = g.constant(Tensor::new([2], vec![-1.0, 1.0]).unwrap());
        assert!(matches!(g.ln(x), Err(Error::NonFinite { op: "ln" })));
        let mut quiet = Graph::<f32>::new();
        let x = quiet.constant(Tensor::new([2], vec![-1.0, 1.0]).unwrap());
        assert!(quiet.ln(x).is_ok());
    }

    #[test]
    fn block_params_scatter_gradient() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::zeros([4, 3])).unwrap();
        let mut g = Graph::new();
        let w = g.param_block(&store, id, 1..3, Some(0..2)).unwrap();
        let l = g.sum(w).unwrap();
        g.backward(l, &mut store).unwrap();
        let expect = [0., 0., 0., 1., 1., 0., 1., 1., 0., 0., 0., 0.];
        assert_eq!(store.grad(id).data(), &expect);
    }
}
