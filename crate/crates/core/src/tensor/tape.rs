use std::collections::HashMap;
use std::fmt;

use super::kernels::{self, ConvGeom, Tap};
use super::{ParamId, ParamStore, Scalar, Shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Differentiable operation kinds, used for diagnostics and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv2d,
    AdaptiveAvgPool,
    BilinearResize,
    GlobalAvgPool,
    Add,
    Sub,
    Mul,
    Sigmoid,
    Tanh,
    Relu,
    ScaleChannels,
    AddBias,
    ConcatChannels,
    SliceChannels,
    BceWithLogits,
    Sum,
    Mean,
}

impl OpKind {
    pub const DIFFERENTIABLE: [OpKind; 17] = [
        OpKind::Conv2d,
        OpKind::AdaptiveAvgPool,
        OpKind::BilinearResize,
        OpKind::GlobalAvgPool,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::Relu,
        OpKind::ScaleChannels,
        OpKind::AddBias,
        OpKind::ConcatChannels,
        OpKind::SliceChannels,
        OpKind::BceWithLogits,
        OpKind::Sum,
        OpKind::Mean,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Conv2d => "conv2d",
            OpKind::AdaptiveAvgPool => "adaptive_avg_pool",
            OpKind::BilinearResize => "bilinear_resize",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Relu => "relu",
            OpKind::ScaleChannels => "scale_channels",
            OpKind::AddBias => "add_bias",
            OpKind::ConcatChannels => "concat_channels",
            OpKind::SliceChannels => "slice_channels",
            OpKind::BceWithLogits => "bce_with_logits",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::DIFFERENTIABLE.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    AdaptiveAvgPool(Var),
    BilinearResize {
        input: Var,
        ty: Vec<Tap<S>>,
        tx: Vec<Tap<S>>,
    },
    GlobalAvgPool(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    ScaleChannels {
        input: Var,
        gate: Var,
    },
    AddBias {
        input: Var,
        bias: Var,
    },
    Concat(Vec<Var>),
    Slice {
        input: Var,
        start: usize,
    },
    Bce {
        logits: Var,
        target: Var,
    },
    Sum(Var),
    Mean(Var),
}

impl<S> Op<S> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::AdaptiveAvgPool(_) => OpKind::AdaptiveAvgPool,
            Op::BilinearResize { .. } => OpKind::BilinearResize,
            Op::GlobalAvgPool(_) => OpKind::GlobalAvgPool,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Relu(_) => OpKind::Relu,
            Op::ScaleChannels { .. } => OpKind::ScaleChannels,
            Op::AddBias { .. } => OpKind::AddBias,
            Op::Concat(_) => OpKind::ConcatChannels,
            Op::Slice { .. } => OpKind::SliceChannels,
            Op::Bce { .. } => OpKind::BceWithLogits,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
        }
    }
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Gradients produced by one backward pass, keyed by leaf.
#[derive(Debug, Default)]
pub struct Gradients<S> {
    leaves: HashMap<Var, Tensor<S>>,
    params: HashMap<ParamId, Tensor<S>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of a leaf recorded with `requires_grad`.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<S>> {
        self.leaves.get(&v)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.params.get(&id)
    }
}

/// Ordered record of executed operations.
#[derive(Debug)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    bound: HashMap<ParamId, Var>,
    scratch: Vec<S>,
    fault: Option<OpKind>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: Shape, b: Shape) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::dim(op, format!("shapes differ: {a} vs {b}")))
    }
}

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
            scratch: Vec::new(),
            fault: None,
        }
    }

    /// Testing hook: corrupts the backward rule of `kind` so gradient checks
    /// can prove they catch a wrong derivative.
    pub fn inject_fault(&mut self, kind: Option<OpKind>) {
        self.fault = kind;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.bound.clear();
    }

    fn node(&self, v: Var) -> &Node<S> {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.node(v).value.shape()
    }

    /// Records a tensor; it takes part in differentiation iff it has
    /// `requires_grad` set.
    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        let needs_grad = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a tensor that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    /// Binds a stored parameter as a trainable leaf (once per tape).
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let mut t = store.get(id).clone();
        t.clear_grad();
        let v = self.leaf(t.with_requires_grad(true));
        self.bound.insert(id, v);
        v
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, op_name: &'static str) -> Result<Var> {
        value.ensure_finite(op_name)?;
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::Conv2d {
                input, weight, bias, ..
            } => {
                self.node(*input).needs_grad
                    || self.node(*weight).needs_grad
                    || bias.is_some_and(|b| self.node(b).needs_grad)
            }
            Op::AdaptiveAvgPool(a)
            | Op::GlobalAvgPool(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Slice { input: a, .. }
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::BilinearResize { input: a, .. } => self.node(*a).needs_grad,
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::ScaleChannels { input: a, gate: b }
            | Op::AddBias { input: a, bias: b }
            | Op::Bce { logits: a, target: b } => self.node(*a).needs_grad || self.node(*b).needs_grad,
            Op::Concat(vs) => vs.iter().any(|v| self.node(*v).needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Zero-padded 2D convolution with square stride. `weight` is
    /// `(out_c, in_c, kh, kw)`, `bias` is `(1, out_c, 1, 1)`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(input);
        let ws = self.shape(weight);
        if stride == 0 {
            return Err(Error::dim("conv2d", "stride must be positive"));
        }
        if xs.c != ws.c {
            return Err(Error::dim(
                "conv2d",
                format!("input has {} channels, weight {ws} expects {}", xs.c, ws.c),
            ));
        }
        if let Some(b) = bias {
            let bs = self.shape(b);
            if bs != Shape::new(1, ws.n, 1, 1) {
                return Err(Error::dim(
                    "conv2d",
                    format!("bias {bs} does not match {} output channels", ws.n),
                ));
            }
        }
        if xs.h + 2 * padding < ws.h || xs.w + 2 * padding < ws.w {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {}x{} larger than padded input {xs}", ws.h, ws.w),
            ));
        }
        let geom = ConvGeom {
            in_c: xs.c,
            in_h: xs.h,
            in_w: xs.w,
            out_c: ws.n,
            kh: ws.h,
            kw: ws.w,
            stride,
            pad: padding,
            out_h: (xs.h + 2 * padding - ws.h) / stride + 1,
            out_w: (xs.w + 2 * padding - ws.w) / stride + 1,
        };
        let os = Shape::new(xs.n, geom.out_c, geom.out_h, geom.out_w);
        let mut out = vec![S::zero(); os.numel()];
        let in_len = xs.c * xs.h * xs.w;
        let out_len = geom.out_c * geom.p();
        let mut scratch = std::mem::take(&mut self.scratch);
        {
            let x = self.value(input).data();
            let w = self.value(weight).data();
            let b = bias.map(|b| self.value(b).data());
            for n in 0..xs.n {
                kernels::conv_forward(
                    &x[n * in_len..(n + 1) * in_len],
                    w,
                    b,
                    &geom,
                    &mut scratch,
                    &mut out[n * out_len..(n + 1) * out_len],
                );
            }
        }
        self.scratch = scratch;
        self.push(
            Tensor::from_raw(os, out),
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            "conv2d",
        )
    }

    /// Mean over the adaptive windows
    /// `[floor(i*H/oh), ceil((i+1)*H/oh)) x [floor(j*W/ow), ceil((j+1)*W/ow))`.
    pub fn adaptive_avg_pool(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xs = self.shape(input);
        if out_h == 0 || out_w == 0 || out_h > xs.h || out_w > xs.w {
            return Err(Error::dim(
                "adaptive_avg_pool",
                format!("cannot pool {xs} to {out_h}x{out_w}"),
            ));
        }
        let os = Shape::new(xs.n, xs.c, out_h, out_w);
        let mut out = vec![S::zero(); os.numel()];
        let x = self.value(input).data();
        for (src, dst) in x.chunks_exact(xs.plane()).zip(out.chunks_exact_mut(os.plane())) {
            kernels::adaptive_pool_forward(src, (xs.h, xs.w), (out_h, out_w), dst);
        }
        self.push(
            Tensor::from_raw(os, out),
            Op::AdaptiveAvgPool(input),
            "adaptive_avg_pool",
        )
    }

    /// Bilinear resampling with half-pixel centers and edge clamping.
    pub fn bilinear_resize(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xs = self.shape(input);
        if out_h == 0 || out_w == 0 || xs.h == 0 || xs.w == 0 {
            return Err(Error::dim(
                "bilinear_resize",
                format!("cannot resize {xs} to {out_h}x{out_w}"),
            ));
        }
        let ty = kernels::resize_taps::<S>(xs.h, out_h);
        let tx = kernels::resize_taps::<S>(xs.w, out_w);
        let os = Shape::new(xs.n, xs.c, out_h, out_w);
        let mut out = vec![S::zero(); os.numel()];
        let x = self.value(input).data();
        for (src, dst) in x.chunks_exact(xs.plane()).zip(out.chunks_exact_mut(os.plane())) {
            kernels::resize_forward(src, xs.w, &ty, &tx, dst);
        }
        self.push(
            Tensor::from_raw(os, out),
            Op::BilinearResize { input, ty, tx },
            "bilinear_resize",
        )
    }

    /// Per-channel spatial mean, `(n, c, 1, 1)`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let xs = self.shape(input);
        if xs.plane() == 0 {
            return Err(Error::dim("global_avg_pool", format!("empty spatial extent {xs}")));
        }
        let inv = S::one() / S::lit(xs.plane() as f64);
        let out = self
            .value(input)
            .data()
            .chunks_exact(xs.plane())
            .map(|p| p.iter().copied().sum::<S>() * inv)
            .collect();
        self.push(
            Tensor::from_raw(Shape::new(xs.n, xs.c, 1, 1), out),
            Op::GlobalAvgPool(input),
            "global_avg_pool",
        )
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(S, S) -> S, op: Op<S>) -> Result<Var> {
        let sa = self.shape(a);
        same_shape(name, sa, self.shape(b))?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push(Tensor::from_raw(sa, out), op, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Sum of several same-shape values (left fold of `add`).
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars.split_first().ok_or_else(|| Error::dim("add", "nothing to add"))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    fn unary(&mut self, a: Var, name: &'static str, f: impl Fn(S) -> S, op: Op<S>) -> Result<Var> {
        let sa = self.shape(a);
        let out = self.value(a).data().iter().map(|&x| f(x)).collect();
        self.push(Tensor::from_raw(sa, out), op, name)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "sigmoid", sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "tanh", |x| x.tanh(), Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "relu", |x| x.max(S::zero()), Op::Relu(a))
    }

    fn channel_vector_check(&self, op: &'static str, x: Var, v: Var) -> Result<(Shape, Shape)> {
        let xs = self.shape(x);
        let vs = self.shape(v);
        if vs.c != xs.c || vs.h != 1 || vs.w != 1 || !(vs.n == 1 || vs.n == xs.n) {
            return Err(Error::dim(op, format!("channel vector {vs} does not fit {xs}")));
        }
        Ok((xs, vs))
    }

    /// Multiplies every spatial position of channel `c` by `gate[c]`. The gate
    /// is `(1, C, 1, 1)` (shared over the batch) or `(N, C, 1, 1)`.
    pub fn scale_channels(&mut self, input: Var, gate: Var) -> Result<Var> {
        let (xs, vs) = self.channel_vector_check("scale_channels", input, gate)?;
        let x = self.value(input).data();
        let g = self.value(gate).data();
        let mut out = Vec::with_capacity(xs.numel());
        for (i, plane) in x.chunks_exact(xs.plane()).enumerate() {
            let (n, c) = (i / xs.c, i % xs.c);
            let k = g[if vs.n == 1 { c } else { n * xs.c + c }];
            out.extend(plane.iter().map(|&v| v * k));
        }
        self.push(
            Tensor::from_raw(xs, out),
            Op::ScaleChannels { input, gate },
            "scale_channels",
        )
    }

    /// Adds `bias[c]` to every spatial position of channel `c`.
    pub fn add_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (xs, vs) = self.channel_vector_check("add_bias", input, bias)?;
        let x = self.value(input).data();
        let b = self.value(bias).data();
        let mut out = Vec::with_capacity(xs.numel());
        for (i, plane) in x.chunks_exact(xs.plane()).enumerate() {
            let (n, c) = (i / xs.c, i % xs.c);
            let k = b[if vs.n == 1 { c } else { n * xs.c + c }];
            out.extend(plane.iter().map(|&v| v + k));
        }
        self.push(Tensor::from_raw(xs, out), Op::AddBias { input, bias }, "add_bias")
    }

    /// Concatenates along channels, preserving input order.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .map(|&v| self.shape(v))
            .ok_or_else(|| Error::dim("concat_channels", "no inputs"))?;
        let mut c = 0;
        for &v in inputs {
            let s = self.shape(v);
            if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
                return Err(Error::dim(
                    "concat_channels",
                    format!("{s} does not match {first} in batch or spatial extent"),
                ));
            }
            c += s.c;
        }
        let os = Shape::new(first.n, c, first.h, first.w);
        let mut out = Vec::with_capacity(os.numel());
        for n in 0..first.n {
            for &v in inputs {
                let t = self.value(v);
                let len = t.shape().c * first.plane();
                out.extend_from_slice(&t.data()[n * len..(n + 1) * len]);
            }
        }
        self.push(
            Tensor::from_raw(os, out),
            Op::Concat(inputs.to_vec()),
            "concat_channels",
        )
    }

    /// Channels `start .. start + len`.
    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(input);
        if len == 0 || start + len > xs.c {
            return Err(Error::dim(
                "slice_channels",
                format!("channels {start}..{} out of {xs}", start + len),
            ));
        }
        let os = Shape::new(xs.n, len, xs.h, xs.w);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(os.numel());
        for n in 0..xs.n {
            let base = (n * xs.c + start) * xs.plane();
            out.extend_from_slice(&x[base..base + len * xs.plane()]);
        }
        self.push(Tensor::from_raw(os, out), Op::Slice { input, start }, "slice_channels")
    }

    /// Mean binary cross-entropy of `logits` against targets in `[0, 1]`,
    /// in the stable form `max(x, 0) - x*t + log(1 + exp(-|x|))`.
    pub fn bce_with_logits(&mut self, logits: Var, target: Var) -> Result<Var> {
        let ls = self.shape(logits);
        same_shape("bce_with_logits", ls, self.shape(target))?;
        let t = self.value(target).data();
        if let Some(bad) = t.iter().find(|v| **v < S::zero() || **v > S::one()) {
            return Err(Error::Domain(format!("bce target {bad} outside [0, 1]")));
        }
        let x = self.value(logits).data();
        let total: S = x
            .iter()
            .zip(t)
            .map(|(&x, &t)| x.max(S::zero()) - x * t + (-x.abs()).exp().ln_1p())
            .sum();
        let loss = total / S::lit(ls.numel() as f64);
        self.push(Tensor::scalar(loss), Op::Bce { logits, target }, "bce_with_logits")
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s: S = self.value(input).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(input), "sum")
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let t = self.value(input);
        let s: S = t.data().iter().copied().sum::<S>() / S::lit(t.shape().numel() as f64);
        self.push(Tensor::scalar(s), Op::Mean(input), "mean")
    }

    /// Reverse pass from a scalar `loss`. Returns gradients for every leaf
    /// with `requires_grad` (zero when the loss does not depend on it) and
    /// clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<S>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Usage(
                "backward called on a value that is not on the tape".into(),
            ));
        }
        let ls = self.shape(loss);
        if ls.numel() != 1 {
            return Err(Error::dim("backward", format!("loss must be scalar, got {ls}")));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![S::one()]);
        let mut scratch = std::mem::take(&mut self.scratch);

        for i in (0..=loss.0).rev() {
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if Some(node.op.kind()) == self.fault {
                let k = S::lit(1.5);
                g.iter_mut().for_each(|v| *v *= k);
            }
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    geom,
                } => {
                    let x = self.nodes[input.0].value.data();
                    let w = self.nodes[weight.0].value.data();
                    let mut dx = self.nodes[input.0]
                        .needs_grad
                        .then(|| take_or_zero(&mut grads, *input, x.len()));
                    let mut dw = self.nodes[weight.0]
                        .needs_grad
                        .then(|| take_or_zero(&mut grads, *weight, w.len()));
                    let mut db = bias
                        .filter(|b| self.nodes[b.0].needs_grad)
                        .map(|b| take_or_zero(&mut grads, b, geom.out_c));
                    let in_len = geom.in_c * geom.in_h * geom.in_w;
                    let out_len = geom.out_c * geom.p();
                    let batch = x.len() / in_len;
                    for n in 0..batch {
                        kernels::conv_backward(
                            &x[n * in_len..(n + 1) * in_len],
                            w,
                            &g[n * out_len..(n + 1) * out_len],
                            geom,
                            &mut scratch,
                            dx.as_mut().map(|d| &mut d[n * in_len..(n + 1) * in_len]),
                            dw.as_deref_mut(),
                            db.as_deref_mut(),
                        );
                    }
                    if let Some(d) = dx {
                        grads[input.0] = Some(d);
                    }
                    if let Some(d) = dw {
                        grads[weight.0] = Some(d);
                    }
                    if let (Some(d), Some(b)) = (db, bias) {
                        grads[b.0] = Some(d);
                    }
                }
                Op::AdaptiveAvgPool(a) => {
                    let xs = self.nodes[a.0].value.shape();
                    let os = node.value.shape();
                    let mut dx = take_or_zero(&mut grads, *a, xs.numel());
                    for (src, dst) in g.chunks_exact(os.plane()).zip(dx.chunks_exact_mut(xs.plane())) {
                        kernels::adaptive_pool_backward(src, (xs.h, xs.w), (os.h, os.w), dst);
                    }
                    grads[a.0] = Some(dx);
                }
                Op::BilinearResize { input, ty, tx } => {
                    let xs = self.nodes[input.0].value.shape();
                    let os = node.value.shape();
                    let mut dx = take_or_zero(&mut grads, *input, xs.numel());
                    for (src, dst) in g.chunks_exact(os.plane()).zip(dx.chunks_exact_mut(xs.plane())) {
                        kernels::resize_backward(src, xs.w, ty, tx, dst);
                    }
                    grads[input.0] = Some(dx);
                }
                Op::GlobalAvgPool(a) => {
                    let xs = self.nodes[a.0].value.shape();
                    let inv = S::one() / S::lit(xs.plane() as f64);
                    let mut dx = take_or_zero(&mut grads, *a, xs.numel());
                    for (gv, dst) in g.iter().zip(dx.chunks_exact_mut(xs.plane())) {
                        let share = *gv * inv;
                        dst.iter_mut().for_each(|d| *d += share);
                    }
                    grads[a.0] = Some(dx);
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if self.nodes[v.0].needs_grad {
                            accumulate(&mut grads, v, g.len(), |d| add_into(d, &g));
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        accumulate(&mut grads, *a, g.len(), |d| add_into(d, &g));
                    }
                    if self.nodes[b.0].needs_grad {
                        accumulate(&mut grads, *b, g.len(), |d| {
                            d.iter_mut().zip(&g).for_each(|(d, g)| *d -= *g)
                        });
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                    if self.nodes[a.0].needs_grad {
                        accumulate(&mut grads, *a, g.len(), |d| {
                            for ((d, g), y) in d.iter_mut().zip(&g).zip(vb) {
                                *d += *g * *y;
                            }
                        });
                    }
                    if self.nodes[b.0].needs_grad {
                        accumulate(&mut grads, *b, g.len(), |d| {
                            for ((d, g), x) in d.iter_mut().zip(&g).zip(va) {
                                *d += *g * *x;
                            }
                        });
                    }
                }
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    accumulate(&mut grads, *a, g.len(), |d| {
                        for ((d, g), y) in d.iter_mut().zip(&g).zip(y) {
                            *d += *g * *y * (S::one() - *y);
                        }
                    });
                }
                Op::Tanh(a) => {
                    let y = node.value.data();
                    accumulate(&mut grads, *a, g.len(), |d| {
                        for ((d, g), y) in d.iter_mut().zip(&g).zip(y) {
                            *d += *g * (S::one() - *y * *y);
                        }
                    });
                }
                Op::Relu(a) => {
                    let x = self.nodes[a.0].value.data();
                    accumulate(&mut grads, *a, g.len(), |d| {
                        for ((d, g), x) in d.iter_mut().zip(&g).zip(x) {
                            if *x > S::zero() {
                                *d += *g;
                            }
                        }
                    });
                }
                Op::ScaleChannels { input, gate } => {
                    let xs = self.nodes[input.0].value.shape();
                    let vs = self.nodes[gate.0].value.shape();
                    let x = self.nodes[input.0].value.data();
                    let k = self.nodes[gate.0].value.data();
                    let plane = xs.plane();
                    let gidx = |i: usize| if vs.n == 1 { i % xs.c } else { i };
                    if self.nodes[input.0].needs_grad {
                        accumulate(&mut grads, *input, g.len(), |d| {
                            for (i, (dp, gp)) in d.chunks_exact_mut(plane).zip(g.chunks_exact(plane)).enumerate() {
                                let kv = k[gidx(i)];
                                dp.iter_mut().zip(gp).for_each(|(d, g)| *d += *g * kv);
                            }
                        });
                    }
                    if self.nodes[gate.0].needs_grad {
                        accumulate(&mut grads, *gate, vs.numel(), |d| {
                            for (i, (xp, gp)) in x.chunks_exact(plane).zip(g.chunks_exact(plane)).enumerate() {
                                d[gidx(i)] += xp.iter().zip(gp).map(|(x, g)| *x * *g).sum::<S>();
                            }
                        });
                    }
                }
                Op::AddBias { input, bias } => {
                    let xs = self.nodes[input.0].value.shape();
                    let vs = self.nodes[bias.0].value.shape();
                    if self.nodes[input.0].needs_grad {
                        accumulate(&mut grads, *input, g.len(), |d| add_into(d, &g));
                    }
                    if self.nodes[bias.0].needs_grad {
                        accumulate(&mut grads, *bias, vs.numel(), |d| {
                            for (i, gp) in g.chunks_exact(xs.plane()).enumerate() {
                                let j = if vs.n == 1 { i % xs.c } else { i };
                                d[j] += gp.iter().copied().sum::<S>();
                            }
                        });
                    }
                }
                Op::Concat(inputs) => {
                    let os = node.value.shape();
                    let mut offset = 0;
                    for v in inputs {
                        let s = self.nodes[v.0].value.shape();
                        if self.nodes[v.0].needs_grad {
                            let len = s.c * os.plane();
                            accumulate(&mut grads, *v, s.numel(), |d| {
                                for n in 0..os.n {
                                    let src = n * os.c * os.plane() + offset;
                                    add_into(&mut d[n * len..(n + 1) * len], &g[src..src + len]);
                                }
                            });
                        }
                        offset += s.c * os.plane();
                    }
                }
                Op::Slice { input, start } => {
                    let xs = self.nodes[input.0].value.shape();
                    let len = node.value.shape().c * xs.plane();
                    accumulate(&mut grads, *input, xs.numel(), |d| {
                        for n in 0..xs.n {
                            let dst = (n * xs.c + start) * xs.plane();
                            add_into(&mut d[dst..dst + len], &g[n * len..(n + 1) * len]);
                        }
                    });
                }
                Op::Bce { logits, target } => {
                    let x = self.nodes[logits.0].value.data();
                    let t = self.nodes[target.0].value.data();
                    let scale = g[0] / S::lit(x.len() as f64);
                    if self.nodes[logits.0].needs_grad {
                        accumulate(&mut grads, *logits, x.len(), |d| {
                            for ((d, x), t) in d.iter_mut().zip(x).zip(t) {
                                *d += (sigmoid(*x) - *t) * scale;
                            }
                        });
                    }
                    if self.nodes[target.0].needs_grad {
                        accumulate(&mut grads, *target, x.len(), |d| {
                            for (d, x) in d.iter_mut().zip(x) {
                                *d -= *x * scale;
                            }
                        });
                    }
                }
                Op::Sum(a) => {
                    let n = self.nodes[a.0].value.shape().numel();
                    let gv = g[0];
                    accumulate(&mut grads, *a, n, |d| d.iter_mut().for_each(|d| *d += gv));
                }
                Op::Mean(a) => {
                    let n = self.nodes[a.0].value.shape().numel();
                    let gv = g[0] / S::lit(n as f64);
                    accumulate(&mut grads, *a, n, |d| d.iter_mut().for_each(|d| *d += gv));
                }
            }
        }
        self.scratch = scratch;

        let mut out = Gradients {
            leaves: HashMap::new(),
            params: HashMap::new(),
        };
        let by_var: HashMap<Var, ParamId> = self.bound.iter().map(|(p, v)| (*v, *p)).collect();
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.needs_grad {
                continue;
            }
            let shape = node.value.shape();
            let data = grads
                .get_mut(i)
                .and_then(Option::take)
                .unwrap_or_else(|| vec![S::zero(); shape.numel()]);
            let t = Tensor::from_raw(shape, data);
            t.ensure_finite("backward")?;
            if let Some(p) = by_var.get(&Var(i)) {
                out.params.insert(*p, t.clone());
            }
            out.leaves.insert(Var(i), t);
        }
        self.clear();
        Ok(out)
    }
}

fn take_or_zero<S: Scalar>(grads: &mut [Option<Vec<S>>], v: Var, len: usize) -> Vec<S> {
    grads[v.0].take().unwrap_or_else(|| vec![S::zero(); len])
}

fn accumulate<S: Scalar>(grads: &mut [Option<Vec<S>>], v: Var, len: usize, f: impl FnOnce(&mut [S])) {
    let slot = grads[v.0].get_or_insert_with(|| vec![S::zero(); len]);
    f(slot);
}
