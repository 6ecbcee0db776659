//! Reverse-mode automatic differentiation over a flat tape.
//!
//! A `Graph` is a Wengert list: every operation appends one node holding
//! its output value and the indices of its inputs. `backward` walks the
//! tape once in reverse, accumulating gradients by summation. The graph
//! is consumed by `backward`; reuse is an error, build a fresh graph per
//! step instead.
//!
//! Invariants enforced here rather than by callers:
//!   - any non-finite forward output is an error (NaN is never a value);
//!   - `log` rejects non-positive inputs;
//!   - a second `backward`, or any op after one, fails with
//!     `GraphConsumed`.

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{broadcast_shape, Element, Tensor};

/// Handle to one node of a [`Graph`]. Only meaningful for the graph that
/// produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Elementwise operation selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElemKind {
    Add,
    Sub,
    Mul,
    Relu,
    Sigmoid,
    Exp,
    Log,
}

impl ElemKind {
    pub fn is_binary(self) -> bool {
        matches!(self, ElemKind::Add | ElemKind::Sub | ElemKind::Mul)
    }

    fn name(self) -> &'static str {
        match self {
            ElemKind::Add => "add",
            ElemKind::Sub => "sub",
            ElemKind::Mul => "mul",
            ElemKind::Relu => "relu",
            ElemKind::Sigmoid => "sigmoid",
            ElemKind::Exp => "exp",
            ElemKind::Log => "log",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolScope {
    Global,
    Window { k: usize, stride: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolAxis {
    Spatial,
    Channel,
}

enum Op<T: Element> {
    Leaf,
    Elem { kind: ElemKind, a: usize, b: Option<usize> },
    AddScalar { a: usize },
    MulScalar { a: usize, c: T },
    Sqrt { a: usize },
    Linear { x: usize, w: usize, b: Option<usize>, rows: usize, din: usize, dout: usize },
    Matmul { a: usize, b: usize },
    Conv2d { x: usize, w: usize, b: Option<usize>, dims: kernels::ConvDims },
    GroupNorm { x: usize, gamma: usize, beta: usize, groups: usize, eps: f64 },
    Softmax { x: usize, axis: usize },
    Pool { x: usize, kind: PoolKind, scope: PoolScope, axis: PoolAxis },
    Resize { x: usize },
    Concat { xs: Vec<usize>, axis: usize },
    Reshape { x: usize },
    Permute { x: usize, perm: Vec<usize> },
    BroadcastTo { x: usize },
    SumAll { x: usize },
    SumAxis { x: usize, axis: usize },
}

struct Node<T: Element> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Gradient map produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T: Element> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), consumed: false }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn live(&self) -> Result<()> {
        if self.consumed {
            Err(Error::GraphConsumed)
        } else {
            Ok(())
        }
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node { value, requires_grad, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Differentiable input (parameter or data the caller wants gradients
    /// for).
    pub fn leaf(&mut self, t: Tensor<T>) -> Result<Var> {
        self.live()?;
        self.push(t, true, Op::Leaf, "leaf")
    }

    /// Non-differentiable input; backward treats it as a constant.
    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.live()?;
        self.push(t, false, Op::Leaf, "constant")
    }

    // ── Elementwise ──────────────────────────────────────────────────

    pub fn elementwise(&mut self, kind: ElemKind, a: Var, b: Option<Var>) -> Result<Var> {
        self.live()?;
        if kind.is_binary() != b.is_some() {
            return Err(Error::InvalidArgument(format!(
                "`{}` takes {} operands",
                kind.name(),
                if kind.is_binary() { 2 } else { 1 }
            )));
        }
        let (value, rg) = match b {
            Some(b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let out_shape = broadcast_shape(ta.shape(), tb.shape())?;
                let numel: usize = out_shape.iter().product();
                let mut out = vec![T::ZERO; numel];
                let (da, db) = (ta.data(), tb.data());
                kernels::for_each_broadcast2(&out_shape, ta.shape(), tb.shape(), |o, ai, bi| {
                    out[o] = match kind {
                        ElemKind::Add => da[ai] + db[bi],
                        ElemKind::Sub => da[ai] - db[bi],
                        ElemKind::Mul => da[ai] * db[bi],
                        _ => unreachable!("unary kind with two operands"),
                    };
                });
                let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
                (Tensor::new(out_shape, out)?, rg)
            }
            None => {
                let ta = &self.nodes[a.0].value;
                if kind == ElemKind::Log {
                    if let Some(v) = ta.data().iter().find(|v| **v <= T::ZERO) {
                        return Err(Error::Domain(format!("log of non-positive value {v}")));
                    }
                }
                let value = ta.map(|v| match kind {
                    ElemKind::Relu => {
                        if v > T::ZERO {
                            v
                        } else {
                            T::ZERO
                        }
                    }
                    ElemKind::Sigmoid => sigmoid(v),
                    ElemKind::Exp => v.exp(),
                    ElemKind::Log => v.ln(),
                    _ => unreachable!("binary kind with one operand"),
                });
                (value, self.nodes[a.0].requires_grad)
            }
        };
        self.push(value, rg, Op::Elem { kind, a: a.0, b: b.map(|v| v.0) }, kind.name())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElemKind::Add, a, Some(b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElemKind::Sub, a, Some(b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElemKind::Mul, a, Some(b))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.elementwise(ElemKind::Relu, a, None)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.elementwise(ElemKind::Sigmoid, a, None)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.elementwise(ElemKind::Exp, a, None)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.elementwise(ElemKind::Log, a, None)
    }

    /// Elementwise square root; the gradient at exactly 0 is taken as 0
    /// (subgradient choice keeping losses at their minimum NaN-free).
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.live()?;
        let ta = &self.nodes[a.0].value;
        if let Some(v) = ta.data().iter().find(|v| **v < T::ZERO) {
            return Err(Error::Domain(format!("sqrt of negative value {v}")));
        }
        let value = ta.map(|v| v.sqrt());
        let rg = self.nodes[a.0].requires_grad;
        self.push(value, rg, Op::Sqrt { a: a.0 }, "sqrt")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.live()?;
        let cc = T::from_f64(c);
        let value = self.nodes[a.0].value.map(|v| v + cc);
        let rg = self.nodes[a.0].requires_grad;
        self.push(value, rg, Op::AddScalar { a: a.0 }, "add_scalar")
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.live()?;
        let cc = T::from_f64(c);
        let value = self.nodes[a.0].value.map(|v| v * cc);
        let rg = self.nodes[a.0].requires_grad;
        self.push(value, rg, Op::MulScalar { a: a.0, c: cc }, "mul_scalar")
    }

    // ── Dense / conv layers ──────────────────────────────────────────

    /// `y = x · Wᵀ (+ b)` over the last axis of `x`; leading axes are
    /// treated as batch.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.live()?;
        let tx = &self.nodes[x.0].value;
        let tw = &self.nodes[w.0].value;
        if tx.rank() < 1 || tw.rank() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "linear wants x rank >= 1 and weight rank 2, got {:?} and {:?}",
                tx.shape(),
                tw.shape()
            )));
        }
        let din = *tx.shape().last().expect("rank >= 1");
        let (dout, wdin) = (tw.shape()[0], tw.shape()[1]);
        if wdin != din {
            return Err(Error::ShapeMismatch(format!(
                "linear inner dims disagree: x has {din}, weight has {wdin}"
            )));
        }
        if let Some(b) = b {
            let tb = &self.nodes[b.0].value;
            if tb.shape() != [dout] {
                return Err(Error::ShapeMismatch(format!(
                    "linear bias shape {:?}, expected [{dout}]",
                    tb.shape()
                )));
            }
        }
        let rows = tx.numel() / din;
        let bias = b.map(|b| self.nodes[b.0].value.data().to_vec());
        let y = kernels::linear_fwd(tx.data(), rows, din, tw.data(), dout, bias.as_deref());
        let mut out_shape = tx.shape().to_vec();
        *out_shape.last_mut().expect("rank >= 1") = dout;
        let rg = self.nodes[x.0].requires_grad
            || self.nodes[w.0].requires_grad
            || b.is_some_and(|b| self.nodes[b.0].requires_grad);
        self.push(
            Tensor::new(out_shape, y)?,
            rg,
            Op::Linear { x: x.0, w: w.0, b: b.map(|v| v.0), rows, din, dout },
            "linear",
        )
    }

    /// Batched matrix product `(B,m,k) · (B,k,n) -> (B,m,n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.live()?;
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rank() != 3 || tb.rank() != 3 || ta.shape()[0] != tb.shape()[0] || ta.shape()[2] != tb.shape()[1]
        {
            return Err(Error::ShapeMismatch(format!(
                "matmul wants (B,m,k)x(B,k,n), got {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (batch, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        let n = tb.shape()[2];
        let c = kernels::matmul_batched_fwd(ta.data(), tb.data(), batch, m, k, n);
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        self.push(Tensor::new(vec![batch, m, n], c)?, rg, Op::Matmul { a: a.0, b: b.0 }, "matmul")
    }

    /// Cross-correlation with odd kernels; output extents must come out
    /// integral for the given stride/padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        self.live()?;
        let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        if tx.rank() != 4 || tw.rank() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "conv2d wants rank-4 x and weight, got {:?} and {:?}",
                tx.shape(),
                tw.shape()
            )));
        }
        let (n, cin, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        let (cout, wcin, kh, kw) = (tw.shape()[0], tw.shape()[1], tw.shape()[2], tw.shape()[3]);
        if wcin != cin {
            return Err(Error::ShapeMismatch(format!(
                "conv2d channel mismatch: input has {cin}, kernel expects {wcin}"
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::InvalidArgument(format!("conv2d kernel extents must be odd, got {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        let ospan = |i: usize, k: usize| -> Result<usize> {
            let span = (i + 2 * padding).checked_sub(k).ok_or_else(|| {
                Error::ShapeMismatch(format!("conv2d kernel {k} exceeds padded input {}", i + 2 * padding))
            })?;
            if span % stride != 0 {
                return Err(Error::ShapeMismatch(format!(
                    "conv2d output extent not integral: ({i} + 2*{padding} - {k}) / {stride}"
                )));
            }
            Ok(span / stride + 1)
        };
        let (oh, ow) = (ospan(h, kh)?, ospan(wd, kw)?);
        if let Some(b) = b {
            let tb = &self.nodes[b.0].value;
            if tb.shape() != [cout] {
                return Err(Error::ShapeMismatch(format!(
                    "conv2d bias shape {:?}, expected [{cout}]",
                    tb.shape()
                )));
            }
        }
        let dims = kernels::ConvDims { n, cin, h, w: wd, cout, kh, kw, stride, pad: padding, oh, ow };
        let bias = b.map(|b| self.nodes[b.0].value.data().to_vec());
        let y = kernels::conv2d_fwd(tx.data(), tw.data(), bias.as_deref(), dims);
        let rg = self.nodes[x.0].requires_grad
            || self.nodes[w.0].requires_grad
            || b.is_some_and(|b| self.nodes[b.0].requires_grad);
        self.push(
            Tensor::new(vec![n, cout, oh, ow], y)?,
            rg,
            Op::Conv2d { x: x.0, w: w.0, b: b.map(|v| v.0), dims },
            "conv2d",
        )
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        self.live()?;
        let tx = &self.nodes[x.0].value;
        if tx.rank() != 4 {
            return Err(Error::ShapeMismatch(format!("group_norm wants rank-4 input, got {:?}", tx.shape())));
        }
        let (n, c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        if groups == 0 || c % groups != 0 {
            return Err(Error::InvalidArgument(format!(
                "group_norm channels {c} not divisible by groups {groups}"
            )));
        }
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::InvalidArgument(format!("group_norm eps must be positive, got {eps}")));
        }
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            let tp = &self.nodes[p.0].value;
            if tp.shape() != [c] {
                return Err(Error::ShapeMismatch(format!(
                    "group_norm {name} shape {:?}, expected [{c}]",
                    tp.shape()
                )));
            }
        }
        let y = kernels::group_norm_fwd(
            tx.data(),
            n,
            c,
            h * w,
            groups,
            self.nodes[gamma.0].value.data(),
            self.nodes[beta.0].value.data(),
            eps,
        );
        let rg = self.nodes[x.0].requires_grad
            || self.nodes[gamma.0].requires_grad
            || self.nodes[beta.0].requires_grad;
        self.push(
            Tensor::new(tx.shape().to_vec(), y)?,
            rg,
            Op::GroupNorm { x: x.0, gamma: gamma.0, beta: beta.0, groups, eps },
            "group_norm",
        )
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.live()?;
        let tx = &self.nodes[x.0].value;
        if axis >= tx.rank() {
            return Err(Error::InvalidArgument(format!(
                "softmax axis {axis} out of range for shape {:?}",
                tx.shape()
            )));
        }
        let (outer, len, inner) = kernels::axis_split(tx.shape(), axis);
        let y = kernels::softmax_fwd(tx.data(), outer, len, inner);
        let rg = self.nodes[x.0].requires_grad;
        self.push(Tensor::new(tx.shape().to_vec(), y)?, rg, Op::Softmax { x: x.0, axis }, "softmax")
    }

    pub fn pool(&mut self, x: Var, kind: PoolKind, scope: PoolScope, axis: PoolAxis) -> Result<Var> {
        self.live()?;
        let tx = &self.nodes[x.0].value;
        if tx.rank() != 4 {
            return Err(Error::ShapeMismatch(format!("pool wants rank-4 input, got {:?}", tx.shape())));
        }
        let (n, c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        let max = kind == PoolKind::Max;
        let (y, out_shape) = match (axis, scope) {
            (PoolAxis::Spatial, PoolScope::Global) => {
                (kernels::global_pool_fwd(tx.data(), n, c, h * w, max), vec![n, c, 1, 1])
            }
            (PoolAxis::Spatial, PoolScope::Window { k, stride }) => {
                if k == 0 || stride == 0 {
                    return Err(Error::InvalidArgument("pool window and stride must be >= 1".into()));
                }
                if k > h || k > w {
                    return Err(Error::InvalidArgument(format!(
                        "pool window {k} larger than input {h}x{w}"
                    )));
                }
                if (h - k) % stride != 0 || (w - k) % stride != 0 {
                    return Err(Error::ShapeMismatch(format!(
                        "pool output extent not integral for window {k} stride {stride} over {h}x{w}"
                    )));
                }
                let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
                (
                    kernels::window_pool_fwd(tx.data(), n, c, h, w, k, stride, oh, ow, max),
                    vec![n, c, oh, ow],
                )
            }
            (PoolAxis::Channel, PoolScope::Global) => {
                (kernels::channel_pool_fwd(tx.data(), n, c, h * w, max), vec![n, 1, h, w])
            }
            (PoolAxis::Channel, PoolScope::Window { .. }) => {
                return Err(Error::InvalidArgument(
                    "channel pooling is global-only; windowed channel pooling is not defined".into(),
                ));
            }
        };
        let rg = self.nodes[x.0].requires_grad;
        self.push(Tensor::new(out_shape, y)?, rg, Op::Pool { x: x.0, kind, scope, axis }, "pool")
    }

    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        self.live()?;
        let tx = &self.nodes[x.0].value;
        if tx.rank() != 4 {
            return Err(Error::ShapeMismatch(format!("resize wants rank-4 input, got {:?}", tx.shape())));
        }
        if out_h == 0 || out_w == 0 {
            return Err(Error::InvalidArgument("resize target extents must be >= 1".into()));
        }
        let (n, c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        let y = kernels::resize_bilinear_fwd(tx.data(), n, c, h, w, out_h, out_w);
        let rg = self.nodes[x.0].requires_grad;
        self.push(Tensor::new(vec![n, c, out_h, out_w], y)?, rg, Op::Resize { x: x.0 }, "resize_bilinear")
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        self.live()?;
        if xs.is_empty() {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        }
        let first = self.nodes[xs[0].0].value.shape().to_vec();
        if axis >= first.len() {
            return Err(Error::InvalidArgument(format!(
                "concat axis {axis} out of range for shape {first:?}"
            )));
        }
        let mut axis_total = 0usize;
        for v in xs {
            let s = self.nodes[v.0].value.shape();
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::ShapeMismatch(format!(
                    "concat inputs disagree outside axis {axis}: {first:?} vs {s:?}"
                )));
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let numel: usize = out_shape.iter().product();
        let mut out = vec![T::ZERO; numel];
        let out_width = axis_total * inner;
        let mut col = 0usize;
        for v in xs {
            let t = &self.nodes[v.0].value;
            let width = t.shape()[axis] * inner;
            for o in 0..outer {
                let src = &t.data()[o * width..(o + 1) * width];
                out[o * out_width + col..o * out_width + col + width].copy_from_slice(src);
            }
            col += width;
        }
        let rg = xs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(
            Tensor::new(out_shape, out)?,
            rg,
            Op::Concat { xs: xs.iter().map(|v| v.0).collect(), axis },
            "concat",
        )
    }

    /// Concatenation along the channel axis of NCHW tensors.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        self.concat(xs, 1)
    }

    // ── Shape plumbing ───────────────────────────────────────────────

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.live()?;
        let value = self.nodes[x.0].value.reshaped(shape)?;
        let rg = self.nodes[x.0].requires_grad;
        self.push(value, rg, Op::Reshape { x: x.0 }, "reshape")
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        self.live()?;
        let tx = &self.nodes[x.0].value;
        let rank = tx.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidArgument(format!(
                "permute {perm:?} is not a permutation of 0..{rank}"
            )));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| tx.shape()[p]).collect();
        let y = kernels::permute_fwd(tx.data(), tx.shape(), perm);
        let rg = self.nodes[x.0].requires_grad;
        self.push(Tensor::new(out_shape, y)?, rg, Op::Permute { x: x.0, perm: perm.to_vec() }, "permute")
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.live()?;
        let tx = &self.nodes[x.0].value;
        let target = broadcast_shape(tx.shape(), shape)?;
        if target != shape {
            return Err(Error::ShapeMismatch(format!(
                "cannot broadcast {:?} to {shape:?}",
                tx.shape()
            )));
        }
        let numel: usize = shape.iter().product();
        let mut out = vec![T::ZERO; numel];
        let data = tx.data();
        kernels::for_each_broadcast2(shape, tx.shape(), tx.shape(), |o, ai, _| out[o] = data[ai]);
        let rg = self.nodes[x.0].requires_grad;
        self.push(Tensor::new(shape.to_vec(), out)?, rg, Op::BroadcastTo { x: x.0 }, "broadcast_to")
    }

    // ── Reductions ───────────────────────────────────────────────────

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        self.live()?;
        let tx = &self.nodes[x.0].value;
        let mut acc = T::ZERO;
        for &v in tx.data() {
            acc = acc + v;
        }
        let rg = self.nodes[x.0].requires_grad;
        self.push(Tensor::scalar(acc), rg, Op::SumAll { x: x.0 }, "sum_all")
    }

    /// Arithmetic mean of all elements, as a rank-0 tensor.
    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.nodes[x.0].value.numel();
        let s = self.sum_all(x)?;
        self.mul_scalar(s, 1.0 / n as f64)
    }

    /// Sum along `axis`, keeping it as extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.live()?;
        let tx = &self.nodes[x.0].value;
        if axis >= tx.rank() {
            return Err(Error::InvalidArgument(format!(
                "sum_axis {axis} out of range for shape {:?}",
                tx.shape()
            )));
        }
        let (outer, len, inner) = kernels::axis_split(tx.shape(), axis);
        let mut out = vec![T::ZERO; outer * inner];
        let data = tx.data();
        for o in 0..outer {
            for k in 0..len {
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + data[(o * len + k) * inner + i];
                }
            }
        }
        let mut out_shape = tx.shape().to_vec();
        out_shape[axis] = 1;
        let rg = self.nodes[x.0].requires_grad;
        self.push(Tensor::new(out_shape, out)?, rg, Op::SumAxis { x: x.0, axis }, "sum_axis")
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Consumes the graph: any further
    /// op or a second backward fails with [`Error::GraphConsumed`].
    /// Every `leaf` receives a gradient (zeros if the loss does not
    /// reach it); accumulation across reuses of a node is summation.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        self.live()?;
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::NonScalarLoss(self.nodes[loss.0].value.shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.nodes[loss.0].value.shape()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.dispatch_backward(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        // Leaves the loss never reached still get a (zero) gradient.
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn dispatch_backward(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let rg = |idx: usize| self.nodes[idx].requires_grad;
        let val = |idx: usize| &self.nodes[idx].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Elem { kind, a, b } => match (kind, b) {
                (ElemKind::Add, Some(b)) | (ElemKind::Sub, Some(b)) => {
                    let negate = *kind == ElemKind::Sub;
                    if rg(*a) {
                        accumulate(grads, *a, reduce_to_shape(g, val(*a).shape()));
                    }
                    if rg(*b) {
                        let mut gb = reduce_to_shape(g, val(*b).shape());
                        if negate {
                            gb = gb.map(|v| -v);
                        }
                        accumulate(grads, *b, gb);
                    }
                }
                (ElemKind::Mul, Some(b)) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let mut da = vec![T::ZERO; ta.numel()];
                    let mut db = vec![T::ZERO; tb.numel()];
                    let (gd, ad, bd) = (g.data(), ta.data(), tb.data());
                    kernels::for_each_broadcast2(g.shape(), ta.shape(), tb.shape(), |o, ai, bi| {
                        da[ai] = da[ai] + gd[o] * bd[bi];
                        db[bi] = db[bi] + gd[o] * ad[ai];
                    });
                    if rg(*a) {
                        accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), da).expect("shape fixed"));
                    }
                    if rg(*b) {
                        accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), db).expect("shape fixed"));
                    }
                }
                (ElemKind::Relu, None) => {
                    if rg(*a) {
                        let x = val(*a).data();
                        let gd = g.data();
                        let da: Vec<T> = x
                            .iter()
                            .zip(gd)
                            .map(|(&x, &g)| if x > T::ZERO { g } else { T::ZERO })
                            .collect();
                        accumulate(grads, *a, Tensor::new(val(*a).shape().to_vec(), da).expect("same shape"));
                    }
                }
                (ElemKind::Sigmoid, None) => {
                    if rg(*a) {
                        let y = self.nodes[i].value.data();
                        let da: Vec<T> =
                            y.iter().zip(g.data()).map(|(&y, &g)| g * y * (T::ONE - y)).collect();
                        accumulate(grads, *a, Tensor::new(val(*a).shape().to_vec(), da).expect("same shape"));
                    }
                }
                (ElemKind::Exp, None) => {
                    if rg(*a) {
                        let y = self.nodes[i].value.data();
                        let da: Vec<T> = y.iter().zip(g.data()).map(|(&y, &g)| g * y).collect();
                        accumulate(grads, *a, Tensor::new(val(*a).shape().to_vec(), da).expect("same shape"));
                    }
                }
                (ElemKind::Log, None) => {
                    if rg(*a) {
                        let x = val(*a).data();
                        let da: Vec<T> = x.iter().zip(g.data()).map(|(&x, &g)| g / x).collect();
                        accumulate(grads, *a, Tensor::new(val(*a).shape().to_vec(), da).expect("same shape"));
                    }
                }
                _ => unreachable!("operand arity checked at construction"),
            },
            Op::AddScalar { a } => {
                if rg(*a) {
                    accumulate(grads, *a, g.clone());
                }
            }
            Op::MulScalar { a, c } => {
                if rg(*a) {
                    let c = *c;
                    accumulate(grads, *a, g.map(|v| v * c));
                }
            }
            Op::Sqrt { a } => {
                if rg(*a) {
                    let y = self.nodes[i].value.data();
                    let two = T::from_f64(2.0);
                    let da: Vec<T> = y
                        .iter()
                        .zip(g.data())
                        .map(|(&y, &g)| if y > T::ZERO { g / (two * y) } else { T::ZERO })
                        .collect();
                    accumulate(grads, *a, Tensor::new(val(*a).shape().to_vec(), da).expect("same shape"));
                }
            }
            Op::Linear { x, w, b, rows, din, dout } => {
                let (dx, dw, db) = kernels::linear_bwd(
                    val(*x).data(),
                    *rows,
                    *din,
                    val(*w).data(),
                    *dout,
                    g.data(),
                    b.is_some(),
                );
                if rg(*x) {
                    accumulate(grads, *x, Tensor::new(val(*x).shape().to_vec(), dx).expect("same shape"));
                }
                if rg(*w) {
                    accumulate(grads, *w, Tensor::new(val(*w).shape().to_vec(), dw).expect("same shape"));
                }
                if let (Some(b), Some(db)) = (b, db) {
                    if rg(*b) {
                        accumulate(grads, *b, Tensor::new(vec![*dout], db).expect("same shape"));
                    }
                }
            }
            Op::Matmul { a, b } => {
                let (ta, tb) = (val(*a), val(*b));
                let (batch, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let n = tb.shape()[2];
                let (da, db) = kernels::matmul_batched_bwd(ta.data(), tb.data(), g.data(), batch, m, k, n);
                if rg(*a) {
                    accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), da).expect("same shape"));
                }
                if rg(*b) {
                    accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), db).expect("same shape"));
                }
            }
            Op::Conv2d { x, w, b, dims } => {
                let (dx, dw, db) =
                    kernels::conv2d_bwd(val(*x).data(), val(*w).data(), g.data(), b.is_some(), *dims);
                if rg(*x) {
                    accumulate(grads, *x, Tensor::new(val(*x).shape().to_vec(), dx).expect("same shape"));
                }
                if rg(*w) {
                    accumulate(grads, *w, Tensor::new(val(*w).shape().to_vec(), dw).expect("same shape"));
                }
                if let (Some(b), Some(db)) = (b, db) {
                    if rg(*b) {
                        accumulate(grads, *b, Tensor::new(vec![dims.cout], db).expect("same shape"));
                    }
                }
            }
            Op::GroupNorm { x, gamma, beta, groups, eps } => {
                let tx = val(*x);
                let (n, c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
                let (dx, dgamma, dbeta) = kernels::group_norm_bwd(
                    tx.data(),
                    g.data(),
                    n,
                    c,
                    h * w,
                    *groups,
                    val(*gamma).data(),
                    *eps,
                );
                if rg(*x) {
                    accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), dx).expect("same shape"));
                }
                if rg(*gamma) {
                    accumulate(grads, *gamma, Tensor::new(vec![c], dgamma).expect("same shape"));
                }
                if rg(*beta) {
                    accumulate(grads, *beta, Tensor::new(vec![c], dbeta).expect("same shape"));
                }
            }
            Op::Softmax { x, axis } => {
                if rg(*x) {
                    let y = &self.nodes[i].value;
                    let (outer, len, inner) = kernels::axis_split(y.shape(), *axis);
                    let dx = kernels::softmax_bwd(y.data(), g.data(), outer, len, inner);
                    accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx).expect("same shape"));
                }
            }
            Op::Pool { x, kind, scope, axis } => {
                if rg(*x) {
                    let tx = val(*x);
                    let (n, c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
                    let max = *kind == PoolKind::Max;
                    let dx = match (axis, scope) {
                        (PoolAxis::Spatial, PoolScope::Global) => {
                            kernels::global_pool_bwd(tx.data(), g.data(), n, c, h * w, max)
                        }
                        (PoolAxis::Spatial, PoolScope::Window { k, stride }) => {
                            let (oh, ow) = (g.shape()[2], g.shape()[3]);
                            kernels::window_pool_bwd(tx.data(), g.data(), n, c, h, w, *k, *stride, oh, ow, max)
                        }
                        (PoolAxis::Channel, PoolScope::Global) => {
                            kernels::channel_pool_bwd(tx.data(), g.data(), n, c, h * w, max)
                        }
                        (PoolAxis::Channel, PoolScope::Window { .. }) => {
                            unreachable!("rejected at construction")
                        }
                    };
                    accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), dx).expect("same shape"));
                }
            }
            Op::Resize { x } => {
                if rg(*x) {
                    let tx = val(*x);
                    let (n, c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
                    let (oh, ow) = (g.shape()[2], g.shape()[3]);
                    let dx = kernels::resize_bilinear_bwd(g.data(), n, c, h, w, oh, ow);
                    accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), dx).expect("same shape"));
                }
            }
            Op::Concat { xs, axis } => {
                let shape = self.nodes[i].value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let out_width = shape[*axis] * inner;
                let mut col = 0usize;
                for &xi in xs {
                    let t = val(xi);
                    let width = t.shape()[*axis] * inner;
                    if rg(xi) {
                        let mut dx = vec![T::ZERO; t.numel()];
                        for o in 0..outer {
                            dx[o * width..(o + 1) * width]
                                .copy_from_slice(&g.data()[o * out_width + col..o * out_width + col + width]);
                        }
                        accumulate(grads, xi, Tensor::new(t.shape().to_vec(), dx).expect("same shape"));
                    }
                    col += width;
                }
            }
            Op::Reshape { x } => {
                if rg(*x) {
                    accumulate(grads, *x, g.reshaped(val(*x).shape()).expect("same numel"));
                }
            }
            Op::Permute { x, perm } => {
                if rg(*x) {
                    let inv = kernels::invert_perm(perm);
                    let dx = kernels::permute_fwd(g.data(), g.shape(), &inv);
                    accumulate(grads, *x, Tensor::new(val(*x).shape().to_vec(), dx).expect("same shape"));
                }
            }
            Op::BroadcastTo { x } => {
                if rg(*x) {
                    accumulate(grads, *x, reduce_to_shape(g, val(*x).shape()));
                }
            }
            Op::SumAll { x } => {
                if rg(*x) {
                    let gv = g.data()[0];
                    accumulate(grads, *x, Tensor::full(val(*x).shape(), gv));
                }
            }
            Op::SumAxis { x, axis } => {
                if rg(*x) {
                    let tx = val(*x);
                    let (outer, len, inner) = kernels::axis_split(tx.shape(), *axis);
                    let mut dx = vec![T::ZERO; tx.numel()];
                    let gd = g.data();
                    for o in 0..outer {
                        for k in 0..len {
                            for idx in 0..inner {
                                dx[(o * len + k) * inner + idx] = gd[o * inner + idx];
                            }
                        }
                    }
                    accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), dx).expect("same shape"));
                }
            }
        }
    }
}

fn sigmoid<T: Element>(x: T) -> T {
    // Stable in both tails: never exponentiates a positive argument.
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

/// Sum `g` down to `shape` over the axes broadcasting stretched.
fn reduce_to_shape<T: Element>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let numel: usize = shape.iter().product();
    let mut out = vec![T::ZERO; numel];
    let gd = g.data();
    kernels::for_each_broadcast2(g.shape(), shape, shape, |o, ai, _| {
        out[ai] = out[ai] + gd[o];
    });
    Tensor::new(shape.to_vec(), out).expect("target shape is valid")
}

fn accumulate<T: Element>(grads: &mut [Option<Tensor<T>>], idx: usize, delta: Tensor<T>) {
    match &mut grads[idx] {
        Some(acc) => {
            debug_assert_eq!(acc.shape(), delta.shape());
            for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                *a = *a + *d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn graph() -> Graph<f64> {
        Graph::new()
    }

    #[test]
    fn add_of_zeros_is_identity() {
        let mut g = graph();
        let x = g.leaf(Tensor::from_fn(&[2, 3], |i| i as f64 - 2.5)).unwrap();
        let z = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let y = g.add(x, z).unwrap();
        assert!(g.value(y).bit_eq(g.value(x)));
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut g = graph();
        let x = g.constant(Tensor::zeros(&[5])).unwrap();
        let y = g.sigmoid(x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn mul_matches_scalar_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a: Tensor<f64> = Tensor::rand_uniform(&[3, 4], -2.0, 2.0, &mut rng);
        let b: Tensor<f64> = Tensor::rand_uniform(&[3, 4], -2.0, 2.0, &mut rng);
        let mut g = graph();
        let (va, vb) = (g.leaf(a.clone()).unwrap(), g.leaf(b.clone()).unwrap());
        let y = g.mul(va, vb).unwrap();
        for i in 0..12 {
            let want = a.data()[i] * b.data()[i];
            assert!((g.value(y).data()[i] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        // (2,3) + (3) broadcasts; the bias gradient collapses the batch.
        let mut g = graph();
        let x = g.leaf(Tensor::from_fn(&[2, 3], |i| i as f64)).unwrap();
        let b = g.leaf(Tensor::from_fn(&[3], |i| i as f64)).unwrap();
        let y = g.add(x, b).unwrap();
        let loss = g.sum_all(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[2.0, 2.0, 2.0]);
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn linear_identity_passthrough() {
        let mut g = graph();
        let x = g.leaf(Tensor::from_fn(&[2, 3], |i| i as f64 * 0.5)).unwrap();
        let w = g.constant(Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 })).unwrap();
        let b = g.constant(Tensor::zeros(&[3])).unwrap();
        let y = g.linear(x, w, Some(b)).unwrap();
        assert!(g.value(y).bit_eq(g.value(x)));
    }

    #[test]
    fn linear_ones_sums_rows() {
        let mut g = graph();
        let x = g.constant(Tensor::ones(&[1, 3])).unwrap();
        let w = g.constant(Tensor::ones(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[2])).unwrap();
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 3.0]);
    }

    #[test]
    fn linear_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Tensor<f64> = Tensor::rand_uniform(&[4, 8], -1.0, 1.0, &mut rng);
        let w: Tensor<f64> = Tensor::rand_uniform(&[5, 8], -1.0, 1.0, &mut rng);
        let b: Tensor<f64> = Tensor::rand_uniform(&[5], -1.0, 1.0, &mut rng);
        let mut g = graph();
        let (vx, vw, vb) = (
            g.leaf(x.clone()).unwrap(),
            g.leaf(w.clone()).unwrap(),
            g.leaf(b.clone()).unwrap(),
        );
        let y = g.linear(vx, vw, Some(vb)).unwrap();
        for r in 0..4 {
            for o in 0..5 {
                let mut want = b.data()[o];
                for i in 0..8 {
                    want += x.data()[r * 8 + i] * w.data()[o * 8 + i];
                }
                assert!((g.value(y).data()[r * 5 + o] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Tensor<f64> = Tensor::rand_uniform(&[1, 2, 4, 4], -1.0, 1.0, &mut rng);
        // 1x1 kernel = channel identity
        let w = Tensor::from_fn(&[2, 2, 1, 1], |i| if i % 3 == 0 { 1.0 } else { 0.0 });
        let mut g = graph();
        let vx = g.leaf(x.clone()).unwrap();
        let vw = g.constant(w).unwrap();
        let y = g.conv2d(vx, vw, None, 1, 0).unwrap();
        assert!(g.value(y).bit_eq(&x));
    }

    #[test]
    fn conv2d_all_ones_sums_window() {
        let mut g = graph();
        let x = g.constant(Tensor::ones(&[1, 1, 3, 3])).unwrap();
        let w = g.constant(Tensor::ones(&[1, 1, 3, 3])).unwrap();
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).data()[0], 9.0);
    }

    #[test]
    fn conv2d_rejects_even_kernel_and_nonintegral_extent() {
        let mut g = graph();
        let x = g.constant(Tensor::ones(&[1, 1, 4, 4])).unwrap();
        let w_even = g.constant(Tensor::ones(&[1, 1, 2, 2])).unwrap();
        assert!(matches!(g.conv2d(x, w_even, None, 1, 0), Err(Error::InvalidArgument(_))));
        let w_odd = g.constant(Tensor::ones(&[1, 1, 3, 3])).unwrap();
        assert!(matches!(g.conv2d(x, w_odd, None, 2, 0), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn group_norm_constant_input_normalizes_to_zero() {
        let mut g = graph();
        let x = g.constant(Tensor::full(&[2, 4, 3, 3], 7.25)).unwrap();
        let gamma = g.constant(Tensor::ones(&[4])).unwrap();
        let beta = g.constant(Tensor::zeros(&[4])).unwrap();
        let y = g.group_norm(x, gamma, beta, 2, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn group_norm_zero_gamma_collapses_to_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = graph();
        let x = g.constant(Tensor::rand_uniform(&[1, 4, 2, 2], -3.0, 3.0, &mut rng)).unwrap();
        let gamma = g.constant(Tensor::zeros(&[4])).unwrap();
        let beta = g.constant(Tensor::from_fn(&[4], |i| i as f64)).unwrap();
        let y = g.group_norm(x, gamma, beta, 4, 1e-5).unwrap();
        for c in 0..4 {
            for p in 0..4 {
                assert_eq!(g.value(y).data()[c * 4 + p], c as f64);
            }
        }
    }

    #[test]
    fn group_norm_standardizes_each_group() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = graph();
        let x = g.constant(Tensor::rand_uniform(&[2, 4, 3, 3], -2.0, 5.0, &mut rng)).unwrap();
        let gamma = g.constant(Tensor::ones(&[4])).unwrap();
        let beta = g.constant(Tensor::zeros(&[4])).unwrap();
        let y = g.group_norm(x, gamma, beta, 2, 1e-10).unwrap();
        let d = g.value(y).data();
        // groups of 2 channels x 9 pixels = 18 values each
        for n in 0..2 {
            for grp in 0..2 {
                let vals: Vec<f64> =
                    (0..18).map(|i| d[n * 36 + grp * 18 + i]).collect();
                let mean: f64 = vals.iter().sum::<f64>() / 18.0;
                let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 18.0;
                assert!(mean.abs() <= 1e-10, "group mean {mean}");
                assert!((var - 1.0).abs() < 1e-6, "group variance {var}");
            }
        }
    }

    #[test]
    fn softmax_uniform_input_gives_uniform_probs() {
        let mut g = graph();
        let x = g.constant(Tensor::full(&[4], 3.0)).unwrap();
        let y = g.softmax(x, 0).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Tensor<f64> = Tensor::rand_uniform(&[7], -3.0, 3.0, &mut rng);
        let mut g = graph();
        let vx = g.constant(x.clone()).unwrap();
        let y1 = g.softmax(vx, 0).unwrap();
        let shifted = g.add_scalar(vx, 17.5).unwrap();
        let y2 = g.softmax(shifted, 0).unwrap();
        assert!(g.value(y1).max_abs_diff(g.value(y2)) < 1e-12);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x: Tensor<f64> = Tensor::rand_uniform(&[7], -2.0, 2.0, &mut rng);
        let mut g = graph();
        let vx = g.constant(x.clone()).unwrap();
        let y = g.softmax(vx, 0).unwrap();
        let denom: f64 = x.data().iter().map(|v| v.exp()).sum();
        for i in 0..7 {
            assert!((g.value(y).data()[i] - x.data()[i].exp() / denom).abs() < 1e-12);
        }
    }

    #[test]
    fn pools_trivial_cases() {
        let mut g = graph();
        let ones = g.constant(Tensor::ones(&[2, 3, 4, 4])).unwrap();
        let avg = g.pool(ones, PoolKind::Avg, PoolScope::Global, PoolAxis::Spatial).unwrap();
        assert_eq!(g.value(avg).shape(), &[2, 3, 1, 1]);
        assert!(g.value(avg).data().iter().all(|&v| v == 1.0));
        let konst = g.constant(Tensor::full(&[1, 2, 3, 3], -4.5)).unwrap();
        let mx = g.pool(konst, PoolKind::Max, PoolScope::Global, PoolAxis::Spatial).unwrap();
        assert!(g.value(mx).data().iter().all(|&v| v == -4.5));
        let ch = g.pool(konst, PoolKind::Avg, PoolScope::Global, PoolAxis::Channel).unwrap();
        assert_eq!(g.value(ch).shape(), &[1, 1, 3, 3]);
    }

    #[test]
    fn window_avg_pool_matches_loop_oracle_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x: Tensor<f64> = Tensor::rand_uniform(&[1, 3, 4, 4], -1.0, 1.0, &mut rng);
        let mut g = graph();
        let vx = g.constant(x.clone()).unwrap();
        let y = g.pool(vx, PoolKind::Avg, PoolScope::Window { k: 2, stride: 2 }, PoolAxis::Spatial).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 3, 2, 2]);
        for c in 0..3 {
            for oy in 0..2 {
                for ox in 0..2 {
                    let mut s = 0.0;
                    for ky in 0..2 {
                        for kx in 0..2 {
                            s += x.data()[c * 16 + (oy * 2 + ky) * 4 + ox * 2 + kx];
                        }
                    }
                    let got = g.value(y).data()[c * 4 + oy * 2 + ox];
                    assert_eq!(got.to_bits(), (s / 4.0).to_bits());
                }
            }
        }
    }

    #[test]
    fn max_pool_gradient_goes_to_first_argmax() {
        // Two equal maxima; row-major first one must take the gradient.
        let x = Tensor::new(vec![1, 1, 2, 2], vec![3.0, 1.0, 3.0, 0.0]).unwrap();
        let mut g = graph();
        let vx = g.leaf(x).unwrap();
        let y = g.pool(vx, PoolKind::Max, PoolScope::Global, PoolAxis::Spatial).unwrap();
        let loss = g.sum_all(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(vx).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn resize_same_size_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x: Tensor<f64> = Tensor::rand_uniform(&[1, 2, 3, 5], -1.0, 1.0, &mut rng);
        let mut g = graph();
        let vx = g.constant(x.clone()).unwrap();
        let y = g.resize_bilinear(vx, 3, 5).unwrap();
        assert!(g.value(y).max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn resize_constant_stays_constant() {
        let mut g = graph();
        let x = g.constant(Tensor::full(&[1, 1, 2, 2], 0.75)).unwrap();
        let y = g.resize_bilinear(x, 5, 7).unwrap();
        assert!(g.value(y).data().iter().all(|&v| (v - 0.75).abs() < 1e-12));
    }

    #[test]
    fn resize_2x2_to_4x4_matches_hand_formula() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let mut g = graph();
        let vx = g.constant(x).unwrap();
        let y = g.resize_bilinear(vx, 4, 4).unwrap();
        #[rustfmt::skip]
        let want = [
            0.0,  0.25, 0.75, 1.0,
            0.5,  0.75, 1.25, 1.5,
            1.5,  1.75, 2.25, 2.5,
            2.0,  2.25, 2.75, 3.0,
        ];
        for (got, want) in g.value(y).data().iter().zip(want) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn concat_single_input_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Tensor<f64> = Tensor::rand_uniform(&[1, 3, 2, 2], -1.0, 1.0, &mut rng);
        let mut g = graph();
        let vx = g.constant(x.clone()).unwrap();
        let y = g.concat_channels(&[vx]).unwrap();
        assert!(g.value(y).bit_eq(&x));
    }

    #[test]
    fn concat_orders_blocks_and_splits_gradient() {
        let a = Tensor::full(&[1, 1, 2, 2], 1.0);
        let b = Tensor::full(&[1, 1, 2, 2], 2.0);
        let mut g = graph();
        let (va, vb) = (g.leaf(a).unwrap(), g.leaf(b).unwrap());
        let y = g.concat_channels(&[va, vb]).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 2, 2, 2]);
        assert_eq!(g.value(y).data(), &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
        let loss = g.sum_all(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(va).unwrap().data(), &[1.0; 4]);
        assert_eq!(grads.get(vb).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = graph();
        let x = g.leaf(Tensor::from_fn(&[3, 2], |i| i as f64)).unwrap();
        let loss = g.sum_all(x).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_scalar_product_swaps_factors() {
        let mut g = graph();
        let a = g.leaf(Tensor::scalar(3.0)).unwrap();
        let b = g.leaf(Tensor::scalar(-2.0)).unwrap();
        let y = g.mul(a, b).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[-2.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[3.0]);
    }

    #[test]
    fn reused_node_accumulates_gradient() {
        // loss = x*x => dl/dx = 2x
        let mut g = graph();
        let x = g.leaf(Tensor::scalar(4.0)).unwrap();
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[8.0]);
    }

    #[test]
    fn second_backward_is_an_error() {
        let mut g = graph();
        let x = g.leaf(Tensor::scalar(1.0)).unwrap();
        let y = g.mul_scalar(x, 2.0).unwrap();
        let _ = g.backward(y).unwrap();
        assert!(matches!(g.backward(y), Err(Error::GraphConsumed)));
    }

    #[test]
    fn ops_after_backward_are_an_error() {
        let mut g = graph();
        let x = g.leaf(Tensor::scalar(1.0)).unwrap();
        let y = g.mul_scalar(x, 2.0).unwrap();
        let _ = g.backward(y).unwrap();
        assert!(matches!(g.mul_scalar(x, 3.0), Err(Error::GraphConsumed)));
    }

    #[test]
    fn non_scalar_loss_is_an_error() {
        let mut g = graph();
        let x = g.leaf(Tensor::ones(&[2, 2])).unwrap();
        let y = g.mul_scalar(x, 2.0).unwrap();
        assert!(matches!(g.backward(y), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn unreached_leaf_gets_zero_gradient() {
        let mut g = graph();
        let x = g.leaf(Tensor::scalar(1.0)).unwrap();
        let unused = g.leaf(Tensor::ones(&[3])).unwrap();
        let y = g.mul_scalar(x, 2.0).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(unused).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn log_rejects_non_positive_input() {
        let mut g = graph();
        let x = g.constant(Tensor::new(vec![2], vec![1.0, 0.0]).unwrap()).unwrap();
        assert!(matches!(g.log(x), Err(Error::Domain(_))));
    }

    #[test]
    fn overflow_to_infinity_is_an_error() {
        let mut g = graph();
        let x = g.constant(Tensor::full(&[2], 1e308)).unwrap();
        assert!(matches!(g.exp(x), Err(Error::NonFinite { op: "exp" })));
    }

    #[test]
    fn chain_gradient_is_correct_by_hand() {
        // loss = mean(relu(2x + 1)) on fixed x with all-positive pre-activations
        let mut g = graph();
        let x = g.leaf(Tensor::new(vec![4], vec![0.5, 1.0, 1.5, 2.0]).unwrap()).unwrap();
        let two_x = g.mul_scalar(x, 2.0).unwrap();
        let shifted = g.add_scalar(two_x, 1.0).unwrap();
        let act = g.relu(shifted).unwrap();
        let loss = g.mean_all(act).unwrap();
        let grads = g.backward(loss).unwrap();
        // d/dx mean(2x+1) = 2/4
        assert_eq!(grads.get(x).unwrap().data(), &[0.5; 4]);
    }

    #[test]
    fn permute_roundtrip_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x: Tensor<f64> = Tensor::rand_uniform(&[2, 3, 4], -1.0, 1.0, &mut rng);
        let mut g = graph();
        let vx = g.leaf(x.clone()).unwrap();
        let p = g.permute(vx, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(p), &[4, 2, 3]);
        let back = g.permute(p, &[1, 2, 0]).unwrap();
        assert!(g.value(back).bit_eq(&x));
        let loss = g.sum_all(back).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(vx).unwrap().data(), &[1.0; 24]);
    }

    #[test]
    fn sum_axis_keeps_extent_one() {
        let mut g = graph();
        let x = g.leaf(Tensor::from_fn(&[2, 3, 2], |i| i as f64)).unwrap();
        let y = g.sum_axis(x, 1).unwrap();
        assert_eq!(g.shape(y), &[2, 1, 2]);
        assert_eq!(g.value(y).data()[0], 0.0 + 2.0 + 4.0);
        let loss = g.sum_all(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 12]);
    }
}
