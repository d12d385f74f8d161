//! Reverse-mode tape.
//!
//! Every differentiable op appends a node holding its output value and the
//! inputs its backward rule needs. [`Tape::backward`] walks the nodes in
//! strict reverse order and accumulates partial gradients additively, so a
//! value consumed by `k` ops receives the sum of `k` contributions.

use std::borrow::Cow;

use super::kernels::{self, ConvGeom, Padding};
use crate::tensor::{dim_err, Tensor, TensorError};

/// Regularizer in the landmark centroid denominator; an all-dark cell
/// resolves to its center.
pub const LANDMARK_EPS: f32 = 1e-6;
/// Lower clamp on probabilities inside cross-entropy.
pub const PROB_FLOOR: f32 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    BiasAdd(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, f: usize },
    Depthwise { x: Var, w: Var, geom: ConvGeom },
    Pointwise { x: Var, w: Var, pixels: usize, c: usize, f: usize },
    Dense { x: Var, w: Var, b: Option<Var>, rows: usize, k: usize, n: usize },
    GlobalAvgPool { x: Var, pixels: usize, c: usize },
    AdaptiveAvgPool { x: Var, h: usize, w: usize, c: usize, oh: usize, ow: usize },
    AvgPool { x: Var, geom: ConvGeom },
    MaxPool2 { x: Var, argmax: Vec<u32> },
    Upsample2 { x: Var, h: usize, w: usize, c: usize },
    Resize { x: Var, h: usize, w: usize, c: usize, oh: usize, ow: usize },
    Concat(Vec<Var>),
    Reshape(Var),
    Stack(Vec<Var>),
    Softmax(Var),
    /// `live` marks label entries whose probability sits above the floor.
    CrossEntropy { p: Var, labels: Tensor, live: Vec<bool> },
    Landmarks { x: Var, grid: usize },
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    requires_grad: bool,
    /// Unrounded value of scalar reductions, which accumulate in `f64`.
    exact: Option<f64>,
}

/// Recorded forward computation. Leaves may borrow parameter tensors for the
/// lifetime `'p`, so binding a model's weights costs no copies.
/// One branch decision of a piecewise op, in recording order.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Branch {
    Relu(Vec<bool>),
    MaxPool(Vec<u32>),
    Clamp(Vec<bool>),
}

/// Every branch a forward pass took. A tape replaying it evaluates the
/// smooth piece of the graph that contains the recorded point, which has the
/// same derivative there as the graph itself.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct Branches(Vec<Branch>);

#[derive(Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    replay: Option<(Branches, usize)>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; `None` when `v` was not reached.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0].as_ref().map(|g| Tensor::from_parts(self.shapes[v.0].clone(), g.clone()))
    }

    /// Like [`Gradients::get`] but unreached values get an explicit zero gradient.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn accumulate(grads: &mut [Option<Vec<f32>>], v: Var, g: Vec<f32>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(&g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn replay_mismatch(op: &'static str) -> TensorError {
    TensorError::InvalidInput { op, detail: "replayed branch does not fit this graph".into() }
}

fn rank3(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize), TensorError> {
    match t.shape() {
        &[h, w, c] => Ok((h, w, c)),
        s => Err(dim_err(op, "rank", 3, s.len())),
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self::default()
    }

    /// A forward-only tape whose relu, max-pool and clamp decisions come from
    /// `branches` instead of the values it sees.
    pub fn replaying(branches: Branches) -> Self {
        Self { nodes: Vec::new(), replay: Some((branches, 0)) }
    }

    fn next_branch(&mut self, op: &'static str) -> Result<Option<Branch>, TensorError> {
        let Some((b, cursor)) = &mut self.replay else { return Ok(None) };
        let branch = b.0.get(*cursor).cloned();
        *cursor += 1;
        branch.map(Some).ok_or_else(|| TensorError::InvalidInput { op, detail: "replayed graph has more branch points than the recording".into() })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Cow::Owned(value), op: Op::Leaf, requires_grad, exact: None });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn borrowed(&mut self, value: &'p Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Cow::Borrowed(value), op: Op::Leaf, requires_grad, exact: None });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Value of a one-element node at the precision it was accumulated in.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let n = &self.nodes[v.0];
        n.exact.unwrap_or_else(|| n.value.item() as f64)
    }

    fn push_scalar(&mut self, name: &'static str, value: f64, op: Op, requires_grad: bool) -> Result<Var, TensorError> {
        let v = self.push(name, vec![], vec![value as f32], op, requires_grad)?;
        self.nodes[v.0].exact = Some(value);
        Ok(v)
    }

    /// Branch decisions of every relu, max-pool and probability clamp so far.
    pub fn branches(&self) -> Branches {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => out.push(Branch::Relu(self.value(*a).data().iter().map(|&v| v > 0.0).collect())),
                Op::MaxPool2 { argmax, .. } => out.push(Branch::MaxPool(argmax.clone())),
                Op::CrossEntropy { live, .. } => out.push(Branch::Clamp(live.clone())),
                _ => {}
            }
        }
        Branches(out)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn push(&mut self, name: &'static str, shape: Vec<usize>, data: Vec<f32>, op: Op, requires_grad: bool) -> Result<Var, TensorError> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: name });
        }
        self.nodes.push(Node { value: Cow::Owned(Tensor::from_parts(shape, data)), op, requires_grad, exact: None });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != sb.len() {
            return Err(dim_err(op, "rank", sa.len(), sb.len()));
        }
        if let Some(i) = sa.iter().zip(sb).position(|(x, y)| x != y) {
            return Err(dim_err(op, i.to_string(), sa[i], sb[i]));
        }
        Ok(())
    }

    fn zip_map(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f32, f32) -> f32) -> Result<Var, TensorError> {
        self.same_shape(name, a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(&[a, b]);
        self.push(name, shape, data, op, rg)
    }

    fn map(&mut self, name: &'static str, a: Var, op: Op, f: impl Fn(f32) -> f32) -> Result<Var, TensorError> {
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(name, shape, data, op, rg)
    }

    /// One-element results keep an `f64` shadow built from their operands'.
    fn carry_exact(&mut self, out: Var, f: impl Fn(&Self) -> f64) -> Var {
        if self.nodes[out.0].value.numel() == 1 {
            self.nodes[out.0].exact = Some(f(self));
        }
        out
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.zip_map("add", a, b, Op::Add(a, b), |x, y| x + y)?;
        Ok(self.carry_exact(out, |t| t.scalar_value(a) + t.scalar_value(b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.zip_map("sub", a, b, Op::Sub(a, b), |x, y| x - y)?;
        Ok(self.carry_exact(out, |t| t.scalar_value(a) - t.scalar_value(b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.zip_map("mul", a, b, Op::Mul(a, b), |x, y| x * y)?;
        Ok(self.carry_exact(out, |t| t.scalar_value(a) * t.scalar_value(b)))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Result<Var, TensorError> {
        let out = self.map("scale", a, Op::Scale(a, s), |x| x * s)?;
        Ok(self.carry_exact(out, |t| t.scalar_value(a) * s as f64))
    }

    /// Adds `b[F]` along the last axis of `x[..., F]`.
    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var, TensorError> {
        let f = *self.value(x).shape().last().unwrap_or(&1);
        let bs = self.value(b).shape();
        if bs != [f] {
            return Err(dim_err("bias_add", "channels", f, bs.iter().product()));
        }
        let bias = self.value(b).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(f) {
            for (v, bv) in row.iter_mut().zip(bias) {
                *v += bv;
            }
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(&[x, b]);
        self.push("bias_add", shape, data, Op::BiasAdd(x, b), rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        match self.next_branch("relu")? {
            None => self.map("relu", a, Op::Relu(a), |x| x.max(0.0)),
            Some(Branch::Relu(mask)) if mask.len() == self.value(a).numel() => {
                let data = self.value(a).data().iter().zip(&mask).map(|(&x, &m)| if m { x } else { 0.0 }).collect();
                let shape = self.value(a).shape().to_vec();
                let rg = self.rg(&[a]);
                self.push("relu", shape, data, Op::Relu(a), rg)
            }
            Some(_) => Err(replay_mismatch("relu")),
        }
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        self.map("sigmoid", a, Op::Sigmoid(a), |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, TensorError> {
        self.map("tanh", a, Op::Tanh(a), f32::tanh)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let s: f64 = self.value(a).data().iter().map(|&v| v as f64).sum();
        let rg = self.rg(&[a]);
        self.push_scalar("sum", s, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.value(a);
        let s: f64 = t.data().iter().map(|&v| v as f64).sum();
        let m = s / t.numel() as f64;
        let rg = self.rg(&[a]);
        self.push_scalar("mean", m, Op::Mean(a), rg)
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mse", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let s: f64 = ta.data().iter().zip(tb.data()).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum();
        let m = s / ta.numel() as f64;
        let rg = self.rg(&[a, b]);
        self.push_scalar("mse", m, Op::Mse(a, b), rg)
    }

    /// Cross-correlation of `x[H,W,C]` with `w[Kh,Kw,C,F]` plus optional `b[F]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: Padding) -> Result<Var, TensorError> {
        let (h, wd, c) = rank3("conv2d", self.value(x))?;
        let (kh, kw, f) = match self.value(w).shape() {
            &[kh, kw, wc, f] => {
                if wc != c {
                    return Err(dim_err("conv2d", "input channels", wc, c));
                }
                (kh, kw, f)
            }
            s => return Err(dim_err("conv2d", "weight rank", 4, s.len())),
        };
        if let Some(b) = b {
            let n = self.value(b).numel();
            if self.value(b).shape() != [f] {
                return Err(dim_err("conv2d", "bias", f, n));
            }
        }
        let geom = ConvGeom::new("conv2d", h, wd, c, kh, kw, stride, padding)?;
        let out = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), b.map(|b| self.value(b).data()), &geom, f);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        self.push("conv2d", vec![geom.oh, geom.ow, f], out, Op::Conv2d { x, w, b, geom, f }, rg)
    }

    /// Per-channel convolution of `x[H,W,C]` with `w[Kh,Kw,C]`; channels never mix.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, stride: usize, padding: Padding) -> Result<Var, TensorError> {
        let (h, wd, c) = rank3("depthwise_conv2d", self.value(x))?;
        let (kh, kw) = match self.value(w).shape() {
            &[kh, kw, wc] => {
                if wc != c {
                    return Err(dim_err("depthwise_conv2d", "weight channels", c, wc));
                }
                (kh, kw)
            }
            s => return Err(dim_err("depthwise_conv2d", "weight rank", 3, s.len())),
        };
        let geom = ConvGeom::new("depthwise_conv2d", h, wd, c, kh, kw, stride, padding)?;
        let out = kernels::depthwise_forward(self.value(x).data(), self.value(w).data(), &geom);
        let rg = self.rg(&[x, w]);
        self.push("depthwise_conv2d", vec![geom.oh, geom.ow, c], out, Op::Depthwise { x, w, geom }, rg)
    }

    /// Per-pixel linear map `x[H,W,C] · w[C,F]`.
    pub fn pointwise_conv2d(&mut self, x: Var, w: Var) -> Result<Var, TensorError> {
        let (h, wd, c) = rank3("pointwise_conv2d", self.value(x))?;
        let f = match self.value(w).shape() {
            &[wc, f] if wc == c => f,
            &[wc, _] => return Err(dim_err("pointwise_conv2d", "weight input channels", c, wc)),
            s => return Err(dim_err("pointwise_conv2d", "weight rank", 2, s.len())),
        };
        let out = kernels::pointwise_forward(self.value(x).data(), self.value(w).data(), h * wd, c, f);
        let rg = self.rg(&[x, w]);
        self.push("pointwise_conv2d", vec![h, wd, f], out, Op::Pointwise { x, w, pixels: h * wd, c, f }, rg)
    }

    /// Affine map of `x[in]` or `x[N,in]` by `w[in,out]` and optional `b[out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, TensorError> {
        let xs = self.value(x).shape().to_vec();
        let (rows, k) = match xs.as_slice() {
            &[k] => (1, k),
            &[n, k] => (n, k),
            s => return Err(dim_err("dense", "input rank", 2, s.len())),
        };
        let n = match self.value(w).shape() {
            &[wk, n] if wk == k => n,
            &[wk, _] => return Err(dim_err("dense", "weight rows", k, wk)),
            s => return Err(dim_err("dense", "weight rank", 2, s.len())),
        };
        if let Some(b) = b {
            if self.value(b).shape() != [n] {
                return Err(dim_err("dense", "bias", n, self.value(b).numel()));
            }
        }
        let out = kernels::matmul(self.value(x).data(), self.value(w).data(), rows, k, n, b.map(|b| self.value(b).data()));
        let shape = if xs.len() == 1 { vec![n] } else { vec![rows, n] };
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        self.push("dense", shape, out, Op::Dense { x, w, b, rows, k, n }, rg)
    }

    /// `[H,W,C] → [C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, TensorError> {
        let (h, w, c) = rank3("global_avg_pool", self.value(x))?;
        let mut acc = vec![0.0f64; c];
        for px in self.value(x).data().chunks_exact(c) {
            for (a, &v) in acc.iter_mut().zip(px) {
                *a += v as f64;
            }
        }
        let n = (h * w) as f64;
        let out = acc.into_iter().map(|a| (a / n) as f32).collect();
        let rg = self.rg(&[x]);
        self.push("global_avg_pool", vec![c], out, Op::GlobalAvgPool { x, pixels: h * w, c }, rg)
    }

    /// Averages `x[H,W,C]` over an `oh × ow` grid of bins
    /// `[floor(i·H/oh), ceil((i+1)·H/oh))`; works for any `oh`, including `oh > H`.
    pub fn adaptive_avg_pool(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var, TensorError> {
        let (h, w, c) = rank3("adaptive_avg_pool", self.value(x))?;
        if oh == 0 || ow == 0 {
            return Err(TensorError::InvalidInput { op: "adaptive_avg_pool", detail: "empty target grid".into() });
        }
        let out = kernels::adaptive_avg_pool_forward(self.value(x).data(), h, w, c, oh, ow);
        let rg = self.rg(&[x]);
        self.push("adaptive_avg_pool", vec![oh, ow, c], out, Op::AdaptiveAvgPool { x, h, w, c, oh, ow }, rg)
    }

    pub fn avg_pool(&mut self, x: Var, k: usize, stride: usize, padding: Padding) -> Result<Var, TensorError> {
        let (h, w, c) = rank3("avg_pool", self.value(x))?;
        let geom = ConvGeom::new("avg_pool", h, w, c, k, k, stride, padding)?;
        let out = kernels::avg_pool_forward(self.value(x).data(), &geom);
        let rg = self.rg(&[x]);
        self.push("avg_pool", vec![geom.oh, geom.ow, c], out, Op::AvgPool { x, geom }, rg)
    }

    /// 2×2 max pooling with stride 2.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var, TensorError> {
        let (h, w, c) = rank3("max_pool2", self.value(x))?;
        if h < 2 || w < 2 {
            return Err(dim_err("max_pool2", if h < 2 { "height" } else { "width" }, 2, h.min(w)));
        }
        let (out, argmax) = match self.next_branch("max_pool2")? {
            None => kernels::max_pool2_forward(self.value(x).data(), h, w, c),
            Some(Branch::MaxPool(arg)) if arg.len() == (h / 2) * (w / 2) * c => {
                let xd = self.value(x).data();
                (arg.iter().map(|&i| xd[i as usize]).collect(), arg)
            }
            Some(_) => return Err(replay_mismatch("max_pool2")),
        };
        let rg = self.rg(&[x]);
        self.push("max_pool2", vec![h / 2, w / 2, c], out, Op::MaxPool2 { x, argmax }, rg)
    }

    /// Nearest-neighbour ×2 upsampling.
    pub fn upsample_nearest2(&mut self, x: Var) -> Result<Var, TensorError> {
        let (h, w, c) = rank3("upsample_nearest2", self.value(x))?;
        let out = kernels::upsample2_forward(self.value(x).data(), h, w, c);
        let rg = self.rg(&[x]);
        self.push("upsample_nearest2", vec![2 * h, 2 * w, c], out, Op::Upsample2 { x, h, w, c }, rg)
    }

    /// Bilinear resize of `[H,W,C]` to `[oh,ow,C]` with half-pixel centres.
    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var, TensorError> {
        let (h, w, c) = rank3("resize_bilinear", self.value(x))?;
        if oh == 0 || ow == 0 {
            return Err(TensorError::InvalidInput { op: "resize_bilinear", detail: format!("target {oh}x{ow} is empty") });
        }
        let out = kernels::resize_bilinear_forward(self.value(x).data(), h, w, c, oh, ow);
        let rg = self.rg(&[x]);
        self.push("resize_bilinear", vec![oh, ow, c], out, Op::Resize { x, h, w, c, oh, ow }, rg)
    }

    /// Concatenates `[H,W,C_i]` maps along channels, in list order.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var, TensorError> {
        let first = *xs.first().ok_or(TensorError::InvalidInput { op: "concat_channels", detail: "empty input list".into() })?;
        let (h, w, _) = rank3("concat_channels", self.value(first))?;
        let mut chans = Vec::with_capacity(xs.len());
        for &v in xs {
            let (hi, wi, ci) = rank3("concat_channels", self.value(v))?;
            if hi != h {
                return Err(dim_err("concat_channels", "height", h, hi));
            }
            if wi != w {
                return Err(dim_err("concat_channels", "width", w, wi));
            }
            chans.push(ci);
        }
        let total: usize = chans.iter().sum();
        let mut out = Vec::with_capacity(h * w * total);
        for p in 0..h * w {
            for (&v, &ci) in xs.iter().zip(&chans) {
                out.extend_from_slice(&self.value(v).data()[p * ci..(p + 1) * ci]);
            }
        }
        let rg = self.rg(xs);
        self.push("concat_channels", vec![h, w, total], out, Op::Concat(xs.to_vec()), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(x);
        let n: usize = shape.iter().product();
        if n != t.numel() || shape.contains(&0) {
            return Err(TensorError::Shape { op: "reshape", detail: format!("cannot view {:?} as {shape:?}", t.shape()) });
        }
        let data = t.data().to_vec();
        let rg = self.rg(&[x]);
        self.push("reshape", shape.to_vec(), data, Op::Reshape(x), rg)
    }

    /// Stacks equal-length vectors `[K]` into rows of `[N,K]`.
    pub fn stack_rows(&mut self, xs: &[Var]) -> Result<Var, TensorError> {
        let first = *xs.first().ok_or(TensorError::InvalidInput { op: "stack_rows", detail: "empty input list".into() })?;
        let k = self.value(first).numel();
        let mut out = Vec::with_capacity(k * xs.len());
        for &v in xs {
            let t = self.value(v);
            if t.ndim() != 1 || t.numel() != k {
                return Err(dim_err("stack_rows", "row length", k, t.numel()));
            }
            out.extend_from_slice(t.data());
        }
        let rg = self.rg(xs);
        self.push("stack_rows", vec![xs.len(), k], out, Op::Stack(xs.to_vec()), rg)
    }

    /// Row-wise softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        let k = *t.shape().last().ok_or(TensorError::InvalidInput { op: "softmax", detail: "scalar input".into() })?;
        let mut out = Vec::with_capacity(t.numel());
        for row in t.data().chunks_exact(k) {
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let e: Vec<f64> = row.iter().map(|&v| ((v - m) as f64).exp()).collect();
            let s: f64 = e.iter().sum();
            out.extend(e.iter().map(|v| (v / s) as f32));
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push("softmax", shape, out, Op::Softmax(x), rg)
    }

    /// `−(1/N) Σ_i Σ_j y_ij · ln(clamp(p_ij, 1e-7, 1))` over rows of `probs`.
    pub fn cross_entropy(&mut self, probs: Var, labels: &Tensor) -> Result<Var, TensorError> {
        self.same_shape_tensor("cross_entropy", probs, labels)?;
        let p = self.value(probs);
        let k = *p.shape().last().unwrap_or(&1);
        let rows = p.numel() / k;
        for (i, row) in labels.data().chunks_exact(k).enumerate() {
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            let zeros = row.iter().filter(|&&v| v == 0.0).count();
            if ones != 1 || zeros != k - 1 {
                return Err(TensorError::InvalidInput { op: "cross_entropy", detail: format!("label row {i} is not one-hot") });
            }
        }
        let floor = (PROB_FLOOR as f64).ln();
        // natural log of every probability, from the logits when available
        let logp: Vec<f64> = if let Op::Softmax(z) = self.nodes[probs.0].op {
            // log-sum-exp on the logits avoids the rounding of stored probabilities
            self.value(z)
                .data()
                .chunks_exact(k)
                .flat_map(|zrow| {
                    let m = zrow.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
                    let lse = zrow.iter().map(|&v| (v as f64 - m).exp()).sum::<f64>().ln();
                    zrow.iter().map(move |&v| (v as f64 - m - lse).min(0.0))
                })
                .collect()
        } else {
            p.data().iter().map(|&v| (v.min(1.0) as f64).ln()).collect()
        };
        let live = match self.next_branch("cross_entropy")? {
            None => logp.iter().map(|&l| l > floor).collect(),
            Some(Branch::Clamp(live)) if live.len() == logp.len() => live,
            Some(_) => return Err(replay_mismatch("cross_entropy")),
        };
        let mut acc = 0.0f64;
        for ((&l, &y), &on) in logp.iter().zip(labels.data()).zip(&live) {
            if y != 0.0 {
                acc -= y as f64 * if on { l } else { floor };
            }
        }
        let rg = self.rg(&[probs]);
        self.push_scalar("cross_entropy", acc / rows as f64, Op::CrossEntropy { p: probs, labels: labels.clone(), live }, rg)
    }

    fn same_shape_tensor(&self, op: &'static str, a: Var, t: &Tensor) -> Result<(), TensorError> {
        let sa = self.value(a).shape();
        if sa.len() != t.ndim() {
            return Err(dim_err(op, "rank", sa.len(), t.ndim()));
        }
        if let Some(i) = sa.iter().zip(t.shape()).position(|(x, y)| x != y) {
            return Err(dim_err(op, i.to_string(), sa[i], t.shape()[i]));
        }
        Ok(())
    }

    /// Intensity-weighted centroids of the channel-mean image over a
    /// `grid × grid` partition, in cell-local coordinates `[0,1]²`.
    /// Output is `[2·grid²]`, laid out `(x̄, ȳ)` per cell in row-major cell order.
    pub fn landmark_centroids(&mut self, x: Var, grid: usize) -> Result<Var, TensorError> {
        let (h, w, c) = rank3("landmark_centroids", self.value(x))?;
        if grid == 0 || grid > h.min(w) {
            return Err(TensorError::InvalidInput { op: "landmark_centroids", detail: format!("grid {grid} does not fit a {h}x{w} image") });
        }
        let out = landmark_forward(self.value(x).data(), h, w, c, grid);
        let rg = self.rg(&[x]);
        self.push("landmark_centroids", vec![2 * grid * grid], out, Op::Landmarks { x, grid }, rg)
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        if self.replay.is_some() {
            return Err(TensorError::InvalidInput { op: "backward", detail: "a replaying tape is forward only".into() });
        }
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(TensorError::InvalidInput { op: "backward", detail: format!("loss must be scalar, got shape {:?}", lt.shape()) });
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn backward_node(&self, node: &Node<'p>, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let mut send = |v: Var, d: Vec<f32>| {
            if self.nodes[v.0].requires_grad {
                accumulate(grads, v, d);
            }
        };
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if rg(*a) {
                    send(*a, g.iter().zip(vb).map(|(d, y)| d * y).collect());
                }
                if rg(*b) {
                    send(*b, g.iter().zip(va).map(|(d, x)| d * x).collect());
                }
            }
            Op::Scale(a, s) => send(*a, g.iter().map(|d| d * s).collect()),
            Op::BiasAdd(x, b) => {
                send(*x, g.to_vec());
                if rg(*b) {
                    let f = self.nodes[b.0].value.numel();
                    let mut db = vec![0.0; f];
                    for row in g.chunks_exact(f) {
                        for (a, v) in db.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    send(*b, db);
                }
            }
            Op::Relu(a) => send(*a, g.iter().zip(val(*a)).map(|(d, &x)| if x > 0.0 { *d } else { 0.0 }).collect()),
            Op::Sigmoid(a) => send(*a, g.iter().zip(out).map(|(d, y)| d * y * (1.0 - y)).collect()),
            Op::Tanh(a) => send(*a, g.iter().zip(out).map(|(d, y)| d * (1.0 - y * y)).collect()),
            Op::Sum(a) => send(*a, vec![g[0]; self.nodes[a.0].value.numel()]),
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.numel();
                send(*a, vec![g[0] / n as f32; n]);
            }
            Op::Mse(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let k = 2.0 * g[0] / va.len() as f32;
                let da: Vec<f32> = va.iter().zip(vb).map(|(x, y)| k * (x - y)).collect();
                if rg(*b) {
                    send(*b, da.iter().map(|v| -v).collect());
                }
                send(*a, da);
            }
            Op::Conv2d { x, w, b, geom, f } => {
                let need = (rg(*x), rg(*w), b.is_some_and(rg));
                let cg = kernels::conv2d_backward(val(*x), val(*w), geom, *f, g, need);
                if let Some(dx) = cg.dx {
                    send(*x, dx);
                }
                if let Some(dw) = cg.dw {
                    send(*w, dw);
                }
                if let (Some(b), Some(db)) = (b, cg.db) {
                    send(*b, db);
                }
            }
            Op::Depthwise { x, w, geom } => {
                let (dx, dw) = kernels::depthwise_backward(val(*x), val(*w), geom, g, rg(*x), rg(*w));
                if let Some(dx) = dx {
                    send(*x, dx);
                }
                if let Some(dw) = dw {
                    send(*w, dw);
                }
            }
            Op::Pointwise { x, w, pixels, c, f } => {
                let (dx, dw) = kernels::matmul_backward(val(*x), val(*w), *pixels, *c, *f, g, rg(*x), rg(*w));
                if let Some(dx) = dx {
                    send(*x, dx);
                }
                if let Some(dw) = dw {
                    send(*w, dw);
                }
            }
            Op::Dense { x, w, b, rows, k, n } => {
                let (dx, dw) = kernels::matmul_backward(val(*x), val(*w), *rows, *k, *n, g, rg(*x), rg(*w));
                if let Some(dx) = dx {
                    send(*x, dx);
                }
                if let Some(dw) = dw {
                    send(*w, dw);
                }
                if let Some(b) = b {
                    if rg(*b) {
                        let mut db = vec![0.0; *n];
                        for row in g.chunks_exact(*n) {
                            for (a, v) in db.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                        send(*b, db);
                    }
                }
            }
            Op::GlobalAvgPool { x, pixels, c } => {
                let inv = 1.0 / *pixels as f32;
                let mut dx = Vec::with_capacity(pixels * c);
                for _ in 0..*pixels {
                    dx.extend(g.iter().map(|d| d * inv));
                }
                send(*x, dx);
            }
            Op::AdaptiveAvgPool { x, h, w, c, oh, ow } => send(*x, kernels::adaptive_avg_pool_backward(g, *h, *w, *c, *oh, *ow)),
            Op::AvgPool { x, geom } => send(*x, kernels::avg_pool_backward(g, geom)),
            Op::MaxPool2 { x, argmax } => {
                let mut dx = vec![0.0; self.nodes[x.0].value.numel()];
                for (d, &i) in g.iter().zip(argmax) {
                    dx[i as usize] += d;
                }
                send(*x, dx);
            }
            Op::Upsample2 { x, h, w, c } => send(*x, kernels::upsample2_backward(g, *h, *w, *c)),
            Op::Concat(xs) => {
                let chans: Vec<usize> = xs.iter().map(|v| *self.nodes[v.0].value.shape().last().unwrap()).collect();
                let total: usize = chans.iter().sum();
                let pixels = g.len() / total;
                let mut offset = 0;
                for (&v, &ci) in xs.iter().zip(&chans) {
                    if rg(v) {
                        let mut dx = Vec::with_capacity(pixels * ci);
                        for p in 0..pixels {
                            dx.extend_from_slice(&g[p * total + offset..p * total + offset + ci]);
                        }
                        send(v, dx);
                    }
                    offset += ci;
                }
            }
            Op::Reshape(x) => send(*x, g.to_vec()),
            Op::Stack(xs) => {
                let k = g.len() / xs.len();
                for (r, &v) in xs.iter().enumerate() {
                    send(v, g[r * k..(r + 1) * k].to_vec());
                }
            }
            Op::Softmax(x) => {
                let k = *node.value.shape().last().unwrap();
                let mut dx = Vec::with_capacity(g.len());
                for (grow, yrow) in g.chunks_exact(k).zip(out.chunks_exact(k)) {
                    let s: f64 = grow.iter().zip(yrow).map(|(&d, &y)| d as f64 * y as f64).sum();
                    dx.extend(grow.iter().zip(yrow).map(|(&d, &y)| (y as f64 * (d as f64 - s)) as f32));
                }
                send(*x, dx);
            }
            Op::CrossEntropy { p, labels, live } => {
                let pv = val(*p);
                let k = *labels.shape().last().unwrap_or(&1);
                let rows = (pv.len() / k) as f64;
                let dp = pv
                    .iter()
                    .zip(labels.data())
                    .zip(live)
                    .map(|((&pp, &y), &on)| if y != 0.0 && on { (-(g[0] as f64) * y as f64 / (pp as f64 * rows)) as f32 } else { 0.0 })
                    .collect();
                send(*p, dp);
            }
            Op::Resize { x, h, w, c, oh, ow } => send(*x, kernels::resize_bilinear_backward(g, *h, *w, *c, *oh, *ow)),
            Op::Landmarks { x, grid } => {
                let shape = self.nodes[x.0].value.shape();
                let dx = landmark_backward(val(*x), out, g, shape[0], shape[1], shape[2], *grid);
                send(*x, dx);
            }
        }
    }
}

pub(crate) fn cell_bounds(i: usize, n: usize, grid: usize) -> (usize, usize) {
    (i * n / grid, (i + 1) * n / grid)
}

fn local_coord(k: usize, len: usize) -> f64 {
    if len > 1 {
        k as f64 / (len - 1) as f64
    } else {
        0.5
    }
}

fn landmark_forward(x: &[f32], h: usize, w: usize, c: usize, grid: usize) -> Vec<f32> {
    let gray = |y: usize, xx: usize| -> f64 { x[(y * w + xx) * c..][..c].iter().map(|&v| v as f64).sum::<f64>() / c as f64 };
    let mut out = Vec::with_capacity(2 * grid * grid);
    for gi in 0..grid {
        let (y0, y1) = cell_bounds(gi, h, grid);
        for gj in 0..grid {
            let (x0, x1) = cell_bounds(gj, w, grid);
            let (mut s, mut sx, mut sy) = (LANDMARK_EPS as f64, 0.5 * LANDMARK_EPS as f64, 0.5 * LANDMARK_EPS as f64);
            for y in y0..y1 {
                for xx in x0..x1 {
                    let v = gray(y, xx);
                    s += v;
                    sx += v * local_coord(xx - x0, x1 - x0);
                    sy += v * local_coord(y - y0, y1 - y0);
                }
            }
            out.push((sx / s) as f32);
            out.push((sy / s) as f32);
        }
    }
    out
}

fn landmark_backward(x: &[f32], out: &[f32], g: &[f32], h: usize, w: usize, c: usize, grid: usize) -> Vec<f32> {
    let mut dx = vec![0.0; x.len()];
    for gi in 0..grid {
        let (y0, y1) = cell_bounds(gi, h, grid);
        for gj in 0..grid {
            let (x0, x1) = cell_bounds(gj, w, grid);
            let cell = gi * grid + gj;
            let (cx, cy) = (out[2 * cell] as f64, out[2 * cell + 1] as f64);
            let (gx, gy) = (g[2 * cell] as f64, g[2 * cell + 1] as f64);
            let mut s = LANDMARK_EPS as f64;
            for y in y0..y1 {
                for xx in x0..x1 {
                    s += x[(y * w + xx) * c..][..c].iter().map(|&v| v as f64).sum::<f64>() / c as f64;
                }
            }
            for y in y0..y1 {
                let v = local_coord(y - y0, y1 - y0);
                for xx in x0..x1 {
                    let u = local_coord(xx - x0, x1 - x0);
                    let dg = (gx * (u - cx) + gy * (v - cy)) / s / c as f64;
                    for d in &mut dx[(y * w + xx) * c..][..c] {
                        *d = dg as f32;
                    }
                }
            }
        }
    }
    dx
}
