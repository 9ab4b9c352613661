//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every primitive application in creation order, which
//! is already a topological order. [`Graph::backward`] walks the tape once
//! in reverse, so each node is visited exactly once per call.

use super::kernels::{self, ConvGeom};
use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A user-supplied pointwise function with its derivative.
#[derive(Clone, Copy)]
pub struct UnaryFn<F> {
    pub name: &'static str,
    pub f: fn(F) -> F,
    pub df: fn(F) -> F,
}

#[derive(Clone, Copy)]
enum Unary<F> {
    Silu,
    Sigmoid,
    Tanh,
    Sqrt,
    Square,
    Clamp(F, F),
    Custom(UnaryFn<F>),
}

impl<F: Float> Unary<F> {
    fn name(&self) -> &'static str {
        match self {
            Unary::Silu => "silu",
            Unary::Sigmoid => "sigmoid",
            Unary::Tanh => "tanh",
            Unary::Sqrt => "sqrt",
            Unary::Square => "square",
            Unary::Clamp(..) => "clamp",
            Unary::Custom(u) => u.name,
        }
    }

    fn apply(&self, x: F) -> F {
        match *self {
            Unary::Silu => x * sigmoid(x),
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Sqrt => x.sqrt(),
            Unary::Square => x * x,
            Unary::Clamp(lo, hi) => x.max(lo).min(hi),
            Unary::Custom(u) => (u.f)(x),
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    fn deriv(&self, x: F, y: F) -> F {
        let one = F::one();
        match *self {
            Unary::Silu => {
                let s = sigmoid(x);
                s * (one + x * (one - s))
            }
            Unary::Sigmoid => y * (one - y),
            Unary::Tanh => one - y * y,
            Unary::Sqrt => F::of(0.5) / y,
            Unary::Square => F::of(2.0) * x,
            Unary::Clamp(lo, hi) => {
                if x >= lo && x <= hi {
                    one
                } else {
                    F::zero()
                }
            }
            Unary::Custom(u) => (u.df)(x),
        }
    }
}

fn sigmoid<F: Float>(x: F) -> F {
    x.sigmoid()
}

enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, F),
    Unary(Var, Unary<F>),
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, xhat: Vec<F>, rstd: Vec<F> },
    Concat(Vec<Var>),
    Upsample2x(Var),
    AvgPool2x(Var),
    PadReplicate(Var, usize),
    Linear { x: Var, w: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    AddChannel(Var, Var),
    SelectRows(Var, Vec<usize>),
    Mse(Var, Var),
    Sum(Var),
}

struct Node<F> {
    value: Tensor<F>,
    requires_grad: bool,
    op: Op<F>,
}

/// Records primitive applications for a single reverse sweep.
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
    backward_done: bool,
}

impl<F: Float> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn expect_rank(op: &'static str, shape: &[usize], rank: usize) -> Result<()> {
    if shape.len() != rank {
        return Err(Error::shape(op, format!("expected rank {rank}, got {shape:?}")));
    }
    Ok(())
}

impl<F: Float> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor<F>) -> Var {
        self.leaf(t, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, t: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: t, requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Copies the value of `v` into a new constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn push(&mut self, name: &'static str, value: Tensor<F>, inputs: &[Var], op: Op<F>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, requires_grad, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push("add", v, &[a, b], Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push("sub", v, &[a, b], Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push("mul", v, &[a, b], Op::Mul(a, b))
    }

    /// `a * scale + shift` with scalar coefficients.
    pub fn affine(&mut self, a: Var, scale: F, shift: F) -> Result<Var> {
        let v = self.value(a).map(|x| x * scale + shift);
        self.push("affine", v, &[a], Op::Affine(a, scale))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Result<Var> {
        self.affine(a, s, F::zero())
    }

    fn unary(&mut self, a: Var, u: Unary<F>) -> Result<Var> {
        let x = self.value(a);
        let v = match u {
            Unary::Silu => x.map(|x| x * x.sigmoid()),
            Unary::Sigmoid => x.map(F::sigmoid),
            _ => x.map(|x| u.apply(x)),
        };
        self.push(u.name(), v, &[a], Op::Unary(a, u))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Silu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Tanh)
    }

    /// Square root; inputs must be strictly positive.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= F::zero()) {
            return Err(Error::invalid("sqrt of a non-positive value"));
        }
        self.unary(a, Unary::Sqrt)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Square)
    }

    /// Clamp to `[lo, hi]`; the gradient passes through inside the interval.
    pub fn clamp(&mut self, a: Var, lo: F, hi: F) -> Result<Var> {
        self.unary(a, Unary::Clamp(lo, hi))
    }

    /// Applies a caller-defined pointwise function with its derivative rule.
    pub fn map_unary(&mut self, a: Var, u: UnaryFn<F>) -> Result<Var> {
        self.unary(a, Unary::Custom(u))
    }

    /// Group normalization over `[N, C, H, W]` with per-channel affine
    /// `gamma`, `beta` of shape `[C]`.
    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        expect_rank("group_norm", &shape, 4)?;
        let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        if groups == 0 || c % groups != 0 {
            return Err(Error::shape("group_norm", format!("{groups} groups do not divide {c} channels")));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("group_norm", format!("affine params must be [{c}]")));
        }
        let (xhat, _mean, rstd) = kernels::group_norm_forward(self.value(x).data(), n, c, hw, groups, eps);
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = xhat.clone();
        for (i, chunk) in out.chunks_mut(hw).enumerate() {
            let ch = i % c;
            for v in chunk {
                *v = *v * gd[ch] + bd[ch];
            }
        }
        let value = Tensor::from_vec(&shape, out)?;
        self.push("group_norm", value, &[x, gamma, beta], Op::GroupNorm { x, gamma, beta, groups, xhat, rstd })
    }

    /// Concatenation along the channel axis of `[N, C_i, H, W]` tensors.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        let base = self.shape(first).to_vec();
        expect_rank("concat_channels", &base, 4)?;
        let mut c_total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 4 || s[0] != base[0] || s[2] != base[2] || s[3] != base[3] {
                return Err(Error::shape("concat_channels", format!("{s:?} vs {base:?}")));
            }
            c_total += s[1];
        }
        let (n, hw) = (base[0], base[2] * base[3]);
        let mut out = Vec::with_capacity(n * c_total * hw);
        for i in 0..n {
            for &p in parts {
                let c = self.shape(p)[1];
                out.extend_from_slice(&self.value(p).data()[i * c * hw..(i + 1) * c * hw]);
            }
        }
        let value = Tensor::from_vec(&[n, c_total, base[2], base[3]], out)?;
        self.push("concat_channels", value, parts, Op::Concat(parts.to_vec()))
    }

    /// Nearest-neighbour 2x upsampling of `[N, C, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        expect_rank("upsample2x", &s, 4)?;
        let out = kernels::upsample2x(self.value(x).data(), s[0] * s[1], s[2], s[3]);
        let value = Tensor::from_vec(&[s[0], s[1], 2 * s[2], 2 * s[3]], out)?;
        self.push("upsample2x", value, &[x], Op::Upsample2x(x))
    }

    /// 2x2 average pooling with stride 2; spatial extents must be even.
    pub fn avg_pool2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        expect_rank("avg_pool2x", &s, 4)?;
        if !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
            return Err(Error::shape("avg_pool2x", format!("odd spatial extent in {s:?}")));
        }
        let out = kernels::avg_pool2x(self.value(x).data(), s[0] * s[1], s[2], s[3]);
        let value = Tensor::from_vec(&[s[0], s[1], s[2] / 2, s[3] / 2], out)?;
        self.push("avg_pool2x", value, &[x], Op::AvgPool2x(x))
    }

    /// Pads each spatial plane by repeating its border pixels.
    pub fn pad_replicate(&mut self, x: Var, pad: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        expect_rank("pad_replicate", &s, 4)?;
        let out = kernels::pad_replicate(self.value(x).data(), s[0] * s[1], s[2], s[3], pad);
        let value = Tensor::from_vec(&[s[0], s[1], s[2] + 2 * pad, s[3] + 2 * pad], out)?;
        self.push("pad_replicate", value, &[x], Op::PadReplicate(x, pad))
    }

    /// `x[N, in] * w[out, in]^T + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        expect_rank("linear", &xs, 2)?;
        expect_rank("linear", &ws, 2)?;
        if xs[1] != ws[1] || self.shape(b) != [ws[0]] {
            return Err(Error::shape("linear", format!("x {xs:?}, w {ws:?}, b {:?}", self.shape(b))));
        }
        let (n, k, m) = (xs[0], xs[1], ws[0]);
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(self.value(b).data());
        }
        F::gemm(n, k, m, F::one(), self.value(x).data(), k as isize, 1, self.value(w).data(), 1, k as isize, F::one(), &mut out, m as isize, 1);
        let value = Tensor::from_vec(&[n, m], out)?;
        self.push("linear", value, &[x, w, b], Op::Linear { x, w, b })
    }

    /// Cross-correlation with zero padding.
    ///
    /// `input [N, C_in, H, W]`, `weight [C_out, C_in, kH, kW]` with odd
    /// kernel extents, optional `bias [C_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        expect_rank("conv2d", &xs, 4)?;
        expect_rank("conv2d", &ws, 4)?;
        if ws[1] != xs[1] {
            return Err(Error::shape("conv2d", format!("input {xs:?} vs weight {ws:?}")));
        }
        if ws[2] % 2 == 0 || ws[3] % 2 == 0 {
            return Err(Error::shape("conv2d", format!("kernel extents must be odd, got {ws:?}")));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be at least 1"));
        }
        if xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[3] {
            return Err(Error::shape("conv2d", format!("kernel {ws:?} larger than padded input {xs:?}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(Error::shape("conv2d", format!("bias {:?} for {} outputs", self.shape(b), ws[0])));
            }
        }
        let geom = ConvGeom {
            n: xs[0],
            c_in: xs[1],
            h: xs[2],
            w: xs[3],
            c_out: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
        };
        let out = kernels::conv2d_forward(&geom, self.value(x).data(), self.value(w).data(), b.map(|b| self.value(b).data()));
        let value = Tensor::from_vec(&[geom.n, geom.c_out, geom.out_h(), geom.out_w()], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("conv2d", value, &inputs, Op::Conv2d { x, w, b, geom })
    }

    /// Adds a per-channel bias to `x [N, C, H, W]`; `bias` is `[C]` (shared
    /// across the batch) or `[N, C]` (one row per item).
    pub fn add_channel(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        expect_rank("add_channel", &xs, 4)?;
        let per_item = match bs.as_slice() {
            [c] if *c == xs[1] => false,
            [n, c] if *n == xs[0] && *c == xs[1] => true,
            _ => return Err(Error::shape("add_channel", format!("bias {bs:?} for input {xs:?}"))),
        };
        let (c, hw) = (xs[1], xs[2] * xs[3]);
        let bd = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for (i, chunk) in out.chunks_mut(hw).enumerate() {
            let bv = if per_item { bd[i] } else { bd[i % c] };
            for v in chunk {
                *v = *v + bv;
            }
        }
        let value = Tensor::from_vec(&xs, out)?;
        self.push("add_channel", value, &[x, bias], Op::AddChannel(x, bias))
    }

    /// Gathers rows of a `[R, D]` table into `[idx.len(), D]`.
    pub fn select_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        expect_rank("select_rows", &ts, 2)?;
        if idx.is_empty() {
            return Err(Error::invalid("select_rows with no indices"));
        }
        let d = ts[1];
        let mut out = Vec::with_capacity(idx.len() * d);
        for &r in idx {
            if r >= ts[0] {
                return Err(Error::shape("select_rows", format!("row {r} of {}", ts[0])));
            }
            out.extend_from_slice(&self.value(table).data()[r * d..(r + 1) * d]);
        }
        let value = Tensor::from_vec(&[idx.len(), d], out)?;
        self.push("select_rows", value, &[table], Op::SelectRows(table, idx.to_vec()))
    }

    /// Mean over all elements of `(a - b)^2`, as a `[1]` tensor.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let s: F = ad.iter().zip(bd).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let value = Tensor::scalar(s / F::of(ad.len() as f64));
        self.push("mse", value, &[a, b], Op::Mse(a, b))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push("sum", value, &[a], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        let s = self.sum(a)?;
        self.scale(s, F::one() / F::of(n as f64))
    }

    /// Clears gradients so that `backward` may run again.
    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Gradient of the last backward's loss with respect to `v`. Leaves that
    /// require gradients but were not reached report zeros; `None` for
    /// values that do not require gradients or before backward ran.
    pub fn grad(&self, v: Var) -> Option<Tensor<F>> {
        if !self.backward_done || !self.nodes[v.0].requires_grad {
            return None;
        }
        let shape = self.nodes[v.0].value.shape();
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => Some(Tensor::from_vec(shape, g.clone()).expect("grad matches value shape")),
            None => Some(Tensor::zeros(shape)),
        }
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(gy) = self.grads[i].take() else { continue };
            self.backprop_node(i, &gy)?;
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, f: impl FnOnce(&mut [F])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let len = self.nodes[v.0].value.len();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![F::zero(); len]);
        f(slot);
    }

    fn backprop_node(&mut self, i: usize, gy: &[F]) -> Result<()> {
        // Temporarily move the op out so node values can be borrowed freely.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        let result = self.backprop_op(i, &op, gy);
        self.nodes[i].op = op;
        result
    }

    fn backprop_op(&mut self, i: usize, op: &Op<F>, gy: &[F]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(*a, |g| add_into(g, gy));
                self.accumulate(*b, |g| add_into(g, gy));
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, |g| add_into(g, gy));
                self.accumulate(*b, |g| {
                    for (o, &d) in g.iter_mut().zip(gy) {
                        *o = *o - d;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.nodes[a.0].value.clone(), self.nodes[b.0].value.clone());
                self.accumulate(*a, |g| {
                    for ((o, &d), &y) in g.iter_mut().zip(gy).zip(bv.data()) {
                        *o = *o + d * y;
                    }
                });
                self.accumulate(*b, |g| {
                    for ((o, &d), &x) in g.iter_mut().zip(gy).zip(av.data()) {
                        *o = *o + d * x;
                    }
                });
            }
            Op::Affine(a, s) => {
                let s = *s;
                self.accumulate(*a, |g| {
                    for (o, &d) in g.iter_mut().zip(gy) {
                        *o = *o + d * s;
                    }
                });
            }
            Op::Unary(a, u) => {
                let xv = self.nodes[a.0].value.clone();
                let yv = self.nodes[i].value.clone();
                self.accumulate(*a, |g| {
                    let rows = g.iter_mut().zip(gy).zip(xv.data()).zip(yv.data());
                    match u {
                        Unary::Silu => {
                            for (((o, &d), &x), _) in rows {
                                let s = x.sigmoid();
                                *o = *o + d * s * (F::one() + x * (F::one() - s));
                            }
                        }
                        _ => {
                            for (((o, &d), &x), &y) in rows {
                                *o = *o + d * u.deriv(x, y);
                            }
                        }
                    }
                });
            }
            Op::GroupNorm { x, gamma, beta, groups, xhat, rstd } => {
                let shape = self.nodes[x.0].value.shape().to_vec();
                let (c, hw) = (shape[1], shape[2] * shape[3]);
                let gd = self.nodes[gamma.0].value.clone();
                self.accumulate(*gamma, |g| {
                    for (k, (d, xh)) in gy.chunks(hw).zip(xhat.chunks(hw)).enumerate() {
                        g[k % c] = g[k % c] + kernels::lane_dot(d, xh);
                    }
                });
                self.accumulate(*beta, |g| {
                    for (k, d) in gy.chunks(hw).enumerate() {
                        g[k % c] = g[k % c] + kernels::lane_sum(d);
                    }
                });
                if self.nodes[x.0].requires_grad {
                    let mut dxhat = gy.to_vec();
                    for (k, chunk) in dxhat.chunks_mut(hw).enumerate() {
                        let s = gd.data()[k % c];
                        for v in chunk {
                            *v = *v * s;
                        }
                    }
                    let per = c / groups * hw;
                    self.accumulate(*x, |g| kernels::group_norm_backward(xhat, &dxhat, rstd, per, g));
                }
            }
            Op::Concat(parts) => {
                let base = self.nodes[i].value.shape().to_vec();
                let (n, c_total, hw) = (base[0], base[1], base[2] * base[3]);
                let mut offset = 0;
                for &p in parts {
                    let c = self.nodes[p.0].value.shape()[1];
                    self.accumulate(p, |g| {
                        for item in 0..n {
                            let src = &gy[(item * c_total + offset) * hw..(item * c_total + offset + c) * hw];
                            add_into(&mut g[item * c * hw..(item + 1) * c * hw], src);
                        }
                    });
                    offset += c;
                }
            }
            Op::Upsample2x(x) => {
                let s = self.nodes[x.0].value.shape().to_vec();
                self.accumulate(*x, |g| kernels::upsample2x_backward(gy, s[0] * s[1], s[2], s[3], g));
            }
            Op::AvgPool2x(x) => {
                let s = self.nodes[x.0].value.shape().to_vec();
                self.accumulate(*x, |g| kernels::avg_pool2x_backward(gy, s[0] * s[1], s[2], s[3], g));
            }
            Op::PadReplicate(x, p) => {
                let s = self.nodes[x.0].value.shape().to_vec();
                self.accumulate(*x, |g| kernels::pad_replicate_backward(gy, s[0] * s[1], s[2], s[3], *p, g));
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.nodes[x.0].value.clone(), self.nodes[w.0].value.clone());
                let (n, k, m) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
                // dx[n,k] += gy[n,m] * w[m,k]
                self.accumulate(*x, |g| {
                    F::gemm(n, m, k, F::one(), gy, m as isize, 1, wv.data(), k as isize, 1, F::one(), g, k as isize, 1)
                });
                // dw[m,k] += gy^T[m,n] * x[n,k]
                self.accumulate(*w, |g| {
                    F::gemm(m, n, k, F::one(), gy, 1, m as isize, xv.data(), k as isize, 1, F::one(), g, k as isize, 1)
                });
                self.accumulate(*b, |g| {
                    for row in gy.chunks(m) {
                        add_into(g, row);
                    }
                });
            }
            Op::Conv2d { x, w, b, geom } => {
                let (xv, wv) = (self.nodes[x.0].value.clone(), self.nodes[w.0].value.clone());
                let need_x = self.nodes[x.0].requires_grad;
                let need_w = self.nodes[w.0].requires_grad;
                let need_b = b.is_some_and(|b| self.nodes[b.0].requires_grad);
                let mut dx = need_x.then(|| vec![F::zero(); xv.len()]);
                let mut dw = need_w.then(|| vec![F::zero(); wv.len()]);
                let mut db = need_b.then(|| vec![F::zero(); geom.c_out]);
                kernels::conv2d_backward(geom, xv.data(), wv.data(), gy, dx.as_deref_mut(), dw.as_deref_mut(), db.as_deref_mut());
                if let Some(dx) = dx {
                    self.accumulate(*x, |g| add_into(g, &dx));
                }
                if let Some(dw) = dw {
                    self.accumulate(*w, |g| add_into(g, &dw));
                }
                if let (Some(db), Some(b)) = (db, b) {
                    self.accumulate(*b, |g| add_into(g, &db));
                }
            }
            Op::AddChannel(x, bias) => {
                let xs = self.nodes[x.0].value.shape().to_vec();
                let (c, hw) = (xs[1], xs[2] * xs[3]);
                let per_item = self.nodes[bias.0].value.shape().len() == 2;
                self.accumulate(*x, |g| add_into(g, gy));
                self.accumulate(*bias, |g| {
                    for (k, chunk) in gy.chunks(hw).enumerate() {
                        let idx = if per_item { k } else { k % c };
                        g[idx] = g[idx] + chunk.iter().copied().sum::<F>();
                    }
                });
            }
            Op::SelectRows(table, idx) => {
                let d = self.nodes[table.0].value.shape()[1];
                self.accumulate(*table, |g| {
                    for (row, &r) in gy.chunks(d).zip(idx) {
                        add_into(&mut g[r * d..(r + 1) * d], row);
                    }
                });
            }
            Op::Mse(a, b) => {
                let (av, bv) = (self.nodes[a.0].value.clone(), self.nodes[b.0].value.clone());
                let scale = F::of(2.0) * gy[0] / F::of(av.len() as f64);
                self.accumulate(*a, |g| {
                    for ((o, &x), &y) in g.iter_mut().zip(av.data()).zip(bv.data()) {
                        *o = *o + scale * (x - y);
                    }
                });
                self.accumulate(*b, |g| {
                    for ((o, &x), &y) in g.iter_mut().zip(av.data()).zip(bv.data()) {
                        *o = *o - scale * (x - y);
                    }
                });
            }
            Op::Sum(a) => {
                let d = gy[0];
                self.accumulate(*a, |g| {
                    for o in g.iter_mut() {
                        *o = *o + d;
                    }
                });
            }
        }
        Ok(())
    }
}

fn add_into<F: Float>(dst: &mut [F], src: &[F]) {
    for (o, &s) in dst.iter_mut().zip(src) {
        *o = *o + s;
    }
}
