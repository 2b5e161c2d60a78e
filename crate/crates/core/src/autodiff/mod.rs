//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records operations as they are evaluated. Ops are coarse
//! (whole convolution layers, a full LSTM cell, per-row mixture likelihoods)
//! so a tape for a training batch stays small; each op carries a hand-derived
//! backward rule. Tapes are single-use: build, call [`Tape::backward`], drop.

pub mod adam;
pub mod conv;
pub mod gradcheck;

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{gemm, log_sum_exp, sigmoid, Real, Tensor};

use conv::Geometry;

pub use adam::{AdamConfig, AdamState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Linear { x: Var, w: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Var, geom: Geometry, c_out: usize },
    Deconv2d { x: Var, w: Var, b: Var, geom: Geometry, c_in: usize },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ClampMin(Var, T),
    Reshape(Var),
    Sum(Var),
    ConcatLast(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceLast { x: Var, start: usize },
    LstmCell { x: Var, h: Var, c: Var, w: Var, b: Var, xh: Vec<T>, gates: Vec<T>, tanh_c: Vec<T> },
    MdnNll { head: Var, target: Var, nz: usize, k: usize },
    BceLogits { logits: Var, target: Var },
    SqErrRows { pred: Var, target: Var },
    KlRows { mu: Var, log_sigma: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

/// Gradients of the leaves that were registered as parameters.
pub struct Gradients<T> {
    grads: HashMap<Var, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.remove(&v)
    }
}

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::shape(op, a.shape(), b.shape()))
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// `x[N, in] · wᵀ + b` with `w` stored `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.val(x), self.val(w), self.val(b));
        if wv.shape().len() != 2 || xv.shape().len() != 2 || xv.shape()[1] != wv.shape()[1] {
            return Err(Error::shape("linear", wv.shape(), xv.shape()));
        }
        let (n, fan_in, fan_out) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
        if bv.shape() != [fan_out] {
            return Err(Error::shape("linear bias", [fan_out], bv.shape()));
        }
        let out = dense_forward(xv.data(), wv.data(), bv.data(), n, fan_in, fan_out);
        let value = Tensor::new(vec![n, fan_out], out)?;
        Ok(self.push(value, Op::Linear { x, w, b }, &[x, w, b]))
    }

    /// Valid-padding convolution of `x[N, H, W, C_in]` with `w[C_out, C_in, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (xv, wv, bv) = (self.val(x), self.val(w), self.val(b));
        let (xs, ws) = (xv.shape(), wv.shape());
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[3] || ws[2] != ws[3] {
            return Err(Error::shape("conv2d", ws, xs));
        }
        let (c_out, k) = (ws[0], ws[2]);
        if bv.shape() != [c_out] {
            return Err(Error::shape("conv2d bias", [c_out], bv.shape()));
        }
        let (oh, ow) = match (
            Geometry::conv_extent(xs[1], k, stride),
            Geometry::conv_extent(xs[2], k, stride),
        ) {
            (Some(h), Some(w)) => (h, w),
            _ => return Err(Error::shape("conv2d input smaller than kernel", ws, xs)),
        };
        let geom = Geometry {
            batch: xs[0],
            height: xs[1],
            width: xs[2],
            channels: xs[3],
            kernel: k,
            stride,
            out_h: oh,
            out_w: ow,
        };
        let out = conv::conv_forward(xv.data(), wv.data(), bv.data(), c_out, &geom);
        let value = Tensor::new(vec![xs[0], oh, ow, c_out], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, geom, c_out }, &[x, w, b]))
    }

    /// Transposed convolution of `x[N, H, W, C_in]` with `w[C_in, C_out, k, k]`.
    pub fn deconv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (xv, wv, bv) = (self.val(x), self.val(w), self.val(b));
        let (xs, ws) = (xv.shape(), wv.shape());
        if xs.len() != 4 || ws.len() != 4 || ws[0] != xs[3] || ws[2] != ws[3] || stride == 0 {
            return Err(Error::shape("deconv2d", ws, xs));
        }
        let (c_in, c_out, k) = (ws[0], ws[1], ws[2]);
        if bv.shape() != [c_out] {
            return Err(Error::shape("deconv2d bias", [c_out], bv.shape()));
        }
        let geom = Geometry {
            batch: xs[0],
            height: Geometry::deconv_extent(xs[1], k, stride),
            width: Geometry::deconv_extent(xs[2], k, stride),
            channels: c_out,
            kernel: k,
            stride,
            out_h: xs[1],
            out_w: xs[2],
        };
        let out = conv::deconv_forward(xv.data(), wv.data(), bv.data(), c_in, &geom);
        let value = Tensor::new(vec![xs[0], geom.height, geom.width, c_out], out)?;
        Ok(self.push(value, Op::Deconv2d { x, w, b, geom, c_in }, &[x, w, b]))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let xv = self.val(x);
        let value = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&v| f(v)).collect())
            .expect("same shape");
        self.push(value, op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, T::tanh, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, T::exp, Op::Exp(x))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    /// Elementwise `max(x, floor)`; the gradient passes only where `x > floor`.
    pub fn clamp_min(&mut self, x: Var, floor: T) -> Var {
        self.unary(x, |v| v.max(floor), Op::ClampMin(x, floor))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (av, bv) = (self.val(a), self.val(b));
        same_shape(name, av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.val(x).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.val(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.val(x).len();
        let s = self.sum(x);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Concatenates 2-D tensors with equal row counts along the last axis.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.val(parts[0]).rows();
        let mut width = 0;
        for &p in parts {
            let v = self.val(p);
            if v.shape().len() != 2 || v.rows() != rows {
                return Err(Error::shape("concat_last", [rows], v.shape()));
            }
            width += v.shape()[1];
        }
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                let v = self.val(p);
                let w = v.shape()[1];
                data.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let value = Tensor::new(vec![rows, width], data)?;
        Ok(self.push(value, Op::ConcatLast(parts.to_vec()), parts))
    }

    /// Stacks tensors along the leading axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tail = self.val(parts[0]).shape()[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.val(p);
            if v.shape()[1..] != tail[..] {
                return Err(Error::shape("concat_rows", &tail, v.shape()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Columns `start..start+len` of a 2-D tensor.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.val(x);
        if v.shape().len() != 2 || start + len > v.shape()[1] || len == 0 {
            return Err(Error::shape("slice_last", [start, len], v.shape()));
        }
        let w = v.shape()[1];
        let rows = v.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&v.data()[r * w + start..r * w + start + len]);
        }
        let value = Tensor::new(vec![rows, len], data)?;
        Ok(self.push(value, Op::SliceLast { x, start }, &[x]))
    }

    /// One LSTM step. `w` is `[4H, D + H]` with gate blocks ordered
    /// input, forget, candidate, output; `b` is `[4H]`. The result is
    /// `[N, 2H]` holding `h'` then `c'`.
    pub fn lstm_cell(&mut self, x: Var, h: Var, c: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, hv, cv, wv, bv) = (self.val(x), self.val(h), self.val(c), self.val(w), self.val(b));
        if xv.shape().len() != 2 || hv.shape().len() != 2 {
            return Err(Error::shape("lstm_cell", "[N, D] and [N, H]", (xv.shape(), hv.shape())));
        }
        let (n, d, hid) = (xv.rows(), xv.shape()[1], hv.shape()[1]);
        if hv.rows() != n || cv.shape() != hv.shape() || wv.shape() != [4 * hid, d + hid] || bv.shape() != [4 * hid] {
            return Err(Error::shape(
                "lstm_cell",
                format!("x[{n},{d}] h,c[{n},{hid}] w[{},{}] b[{}]", 4 * hid, d + hid, 4 * hid),
                (hv.shape(), cv.shape(), wv.shape(), bv.shape()),
            ));
        }
        let LstmForward { xh, gates, tanh_c, out } = lstm_forward(xv.data(), hv.data(), cv.data(), wv.data(), bv.data(), n, d, hid);
        let value = Tensor::new(vec![n, 2 * hid], out)?;
        Ok(self.push(
            value,
            Op::LstmCell { x, h, c, w, b, xh, gates, tanh_c },
            &[x, h, c, w, b],
        ))
    }

    /// Per-row negative log-likelihood of `target[R, nz]` under the factored
    /// mixture in `head[R, P]` (`P ≥ 3·nz·k`, laid out as logit π, μ, log σ,
    /// each `nz×k`). Returns `[R]`.
    pub fn mdn_nll(&mut self, head: Var, target: Var, nz: usize, k: usize) -> Result<Var> {
        let (hv, tv) = (self.val(head), self.val(target));
        if hv.shape().len() != 2 || hv.shape()[1] < 3 * nz * k || tv.shape() != [hv.rows(), nz] {
            return Err(Error::shape("mdn_nll", (hv.rows(), nz, 3 * nz * k), (hv.shape(), tv.shape())));
        }
        let p = hv.shape()[1];
        let out: Vec<T> = (0..hv.rows())
            .map(|r| {
                let row = &hv.data()[r * p..(r + 1) * p];
                let z = &tv.data()[r * nz..(r + 1) * nz];
                (0..nz).map(|d| mixture_dim_nll(row, z[d], d, nz, k)).sum()
            })
            .collect();
        let value = Tensor::new(vec![hv.rows()], out)?;
        Ok(self.push(value, Op::MdnNll { head, target, nz, k }, &[head, target]))
    }

    /// Elementwise binary cross-entropy from logits.
    pub fn bce_with_logits(&mut self, logits: Var, target: Var) -> Result<Var> {
        self.binary(
            "bce_with_logits",
            logits,
            target,
            |x, y| x.max(T::zero()) - x * y + (T::one() + (-x.abs()).exp()).ln(),
            Op::BceLogits { logits, target },
        )
    }

    /// Per-row sum of squared differences.
    pub fn sq_err_rows(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (pv, tv) = (self.val(pred), self.val(target));
        same_shape("sq_err_rows", pv, tv)?;
        let w = pv.row_len();
        let out: Vec<T> = pv
            .data()
            .chunks_exact(w)
            .zip(tv.data().chunks_exact(w))
            .map(|(p, t)| p.iter().zip(t).map(|(&a, &b)| (a - b) * (a - b)).sum())
            .collect();
        let value = Tensor::new(vec![pv.rows()], out)?;
        Ok(self.push(value, Op::SqErrRows { pred, target }, &[pred, target]))
    }

    /// Per-row KL divergence of `N(μ, σ²)` from `N(0, I)`.
    pub fn kl_rows(&mut self, mu: Var, log_sigma: Var) -> Result<Var> {
        let (mv, sv) = (self.val(mu), self.val(log_sigma));
        same_shape("kl_rows", mv, sv)?;
        let w = mv.row_len();
        let half = T::lit(0.5);
        let out: Vec<T> = mv
            .data()
            .chunks_exact(w)
            .zip(sv.data().chunks_exact(w))
            .map(|(m, s)| {
                m.iter()
                    .zip(s)
                    .map(|(&m, &ls)| -half - ls + half * m * m + half * (ls + ls).exp())
                    .sum()
            })
            .collect();
        let value = Tensor::new(vec![mv.rows()], out)?;
        Ok(self.push(value, Op::KlRows { mu, log_sigma }, &[mu, log_sigma]))
    }

    /// Reverse pass from a scalar node. Returns gradients for every leaf
    /// created with [`Tape::param`].
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.val(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.val(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = HashMap::new();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                out.insert(Var(i), Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            for (v, contribution) in self.propagate(i, &g) {
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, &c)| *a += c),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(Gradients { grads: out })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn emit(&self, out: &mut Vec<(Var, Vec<T>)>, v: Var, f: &dyn Fn(usize) -> T) {
        if self.wants(v) {
            let len = self.nodes[v.0].value.len();
            out.push((v, (0..len).map(f).collect()));
        }
    }

    fn zeros_like(&self, v: Var) -> Vec<T> {
        vec![T::zero(); self.nodes[v.0].value.len()]
    }

    /// Gradient contributions of node `i` to its inputs, given the node's
    /// own gradient `g`.
    fn propagate(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let mut out: Vec<(Var, Vec<T>)> = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.val(*x), self.val(*w));
                let (n, fan_in, fan_out) = (xv.rows(), xv.shape()[1], wv.shape()[0]);
                if self.wants(*w) {
                    let mut dw = self.zeros_like(*w);
                    gemm(fan_out, n, fan_in, g, true, xv.data(), false, T::zero(), &mut dw);
                    out.push((*w, dw));
                }
                if self.wants(*b) {
                    out.push((*b, column_sums(g, fan_out)));
                }
                if self.wants(*x) {
                    let mut dx = self.zeros_like(*x);
                    gemm(n, fan_out, fan_in, g, false, wv.data(), false, T::zero(), &mut dx);
                    out.push((*x, dx));
                }
            }
            Op::Conv2d { x, w, b, geom, c_out } => {
                let mut dw = self.wants(*w).then(|| self.zeros_like(*w));
                let mut db = self.wants(*b).then(|| self.zeros_like(*b));
                let dx = conv::conv_backward(
                    self.val(*x).data(),
                    self.val(*w).data(),
                    g,
                    *c_out,
                    geom,
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                    self.wants(*x),
                );
                out.extend(dw.map(|d| (*w, d)));
                out.extend(db.map(|d| (*b, d)));
                out.extend(dx.map(|d| (*x, d)));
            }
            Op::Deconv2d { x, w, b, geom, c_in } => {
                let mut dw = self.wants(*w).then(|| self.zeros_like(*w));
                let mut db = self.wants(*b).then(|| self.zeros_like(*b));
                let dx = conv::deconv_backward(
                    self.val(*x).data(),
                    self.val(*w).data(),
                    g,
                    *c_in,
                    geom,
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                    self.wants(*x),
                );
                out.extend(dw.map(|d| (*w, d)));
                out.extend(db.map(|d| (*b, d)));
                out.extend(dx.map(|d| (*x, d)));
            }
            Op::Relu(x) => {
                let xv = self.val(*x).data();
                self.emit(&mut out, *x, &|j| if xv[j] > T::zero() { g[j] } else { T::zero() });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                self.emit(&mut out, *x, &|j| g[j] * y[j] * (T::one() - y[j]));
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                self.emit(&mut out, *x, &|j| g[j] * (T::one() - y[j] * y[j]));
            }
            Op::Exp(x) => {
                let y = node.value.data();
                self.emit(&mut out, *x, &|j| g[j] * y[j]);
            }
            Op::Add(a, b) => {
                self.emit(&mut out, *a, &|j| g[j]);
                self.emit(&mut out, *b, &|j| g[j]);
            }
            Op::Sub(a, b) => {
                self.emit(&mut out, *a, &|j| g[j]);
                self.emit(&mut out, *b, &|j| -g[j]);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a).data(), self.val(*b).data());
                self.emit(&mut out, *a, &|j| g[j] * bv[j]);
                self.emit(&mut out, *b, &|j| g[j] * av[j]);
            }
            Op::Scale(x, c) => self.emit(&mut out, *x, &|j| g[j] * *c),
            Op::ClampMin(x, floor) => {
                let xv = self.val(*x).data();
                self.emit(&mut out, *x, &|j| if xv[j] > *floor { g[j] } else { T::zero() });
            }
            Op::Reshape(x) => self.emit(&mut out, *x, &|j| g[j]),
            Op::Sum(x) => self.emit(&mut out, *x, &|_| g[0]),
            Op::ConcatLast(parts) => {
                let width = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.val(p).shape()[1];
                    self.emit(&mut out, p, &|j| g[(j / w) * width + offset + j % w]);
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    self.emit(&mut out, p, &|j| g[offset + j]);
                    offset += self.val(p).len();
                }
            }
            Op::SliceLast { x, start } => {
                let w = self.val(*x).shape()[1];
                let len = node.value.shape()[1];
                self.emit(&mut out, *x, &|j| {
                    let col = j % w;
                    if col >= *start && col < start + len {
                        g[(j / w) * len + col - start]
                    } else {
                        T::zero()
                    }
                });
            }
            Op::LstmCell { x, h, c, w, b, xh, gates, tanh_c } => {
                let (n, d) = (self.val(*x).rows(), self.val(*x).shape()[1]);
                let hid = self.val(*h).shape()[1];
                let c_prev = self.val(*c).data();
                let mut dz = vec![T::zero(); n * 4 * hid];
                let mut dc_prev = vec![T::zero(); n * hid];
                for r in 0..n {
                    let gr = &gates[r * 4 * hid..(r + 1) * 4 * hid];
                    let dzr = &mut dz[r * 4 * hid..(r + 1) * 4 * hid];
                    for j in 0..hid {
                        let (ig, fg, cg, og) = (gr[j], gr[hid + j], gr[2 * hid + j], gr[3 * hid + j]);
                        let t = tanh_c[r * hid + j];
                        let dh = g[r * 2 * hid + j];
                        let dc = g[r * 2 * hid + hid + j] + dh * og * (T::one() - t * t);
                        dzr[j] = dc * cg * ig * (T::one() - ig);
                        dzr[hid + j] = dc * c_prev[r * hid + j] * fg * (T::one() - fg);
                        dzr[2 * hid + j] = dc * ig * (T::one() - cg * cg);
                        dzr[3 * hid + j] = dh * t * og * (T::one() - og);
                        dc_prev[r * hid + j] = dc * fg;
                    }
                }
                if self.wants(*w) {
                    let mut dw = self.zeros_like(*w);
                    gemm(4 * hid, n, d + hid, &dz, true, xh, false, T::zero(), &mut dw);
                    out.push((*w, dw));
                }
                if self.wants(*b) {
                    out.push((*b, column_sums(&dz, 4 * hid)));
                }
                if self.wants(*x) || self.wants(*h) {
                    let mut dxh = vec![T::zero(); n * (d + hid)];
                    gemm(n, 4 * hid, d + hid, &dz, false, self.val(*w).data(), false, T::zero(), &mut dxh);
                    self.emit(&mut out, *x, &|j| dxh[(j / d) * (d + hid) + j % d]);
                    self.emit(&mut out, *h, &|j| dxh[(j / hid) * (d + hid) + d + j % hid]);
                }
                self.emit(&mut out, *c, &|j| dc_prev[j]);
            }
            Op::MdnNll { head, target, nz, k } => {
                let (nz, k) = (*nz, *k);
                let hv = self.val(*head);
                let tv = self.val(*target).data();
                let p = hv.shape()[1];
                let mut dhead = vec![T::zero(); hv.len()];
                let mut dtarget = vec![T::zero(); tv.len()];
                for r in 0..hv.rows() {
                    let row = &hv.data()[r * p..(r + 1) * p];
                    let drow = &mut dhead[r * p..(r + 1) * p];
                    for d in 0..nz {
                        dtarget[r * nz + d] = mixture_dim_grad(row, tv[r * nz + d], d, nz, k, g[r], drow);
                    }
                }
                self.emit(&mut out, *head, &|j| dhead[j]);
                self.emit(&mut out, *target, &|j| dtarget[j]);
            }
            Op::BceLogits { logits, target } => {
                let (xv, yv) = (self.val(*logits).data(), self.val(*target).data());
                self.emit(&mut out, *logits, &|j| g[j] * (sigmoid(xv[j]) - yv[j]));
                self.emit(&mut out, *target, &|j| -g[j] * xv[j]);
            }
            Op::SqErrRows { pred, target } => {
                let w = self.val(*pred).row_len();
                let (pd, td) = (self.val(*pred).data(), self.val(*target).data());
                let two = T::lit(2.0);
                self.emit(&mut out, *pred, &|j| two * g[j / w] * (pd[j] - td[j]));
                self.emit(&mut out, *target, &|j| -two * g[j / w] * (pd[j] - td[j]));
            }
            Op::KlRows { mu, log_sigma } => {
                let w = self.val(*mu).row_len();
                let (mv, sv) = (self.val(*mu).data(), self.val(*log_sigma).data());
                self.emit(&mut out, *mu, &|j| g[j / w] * mv[j]);
                self.emit(&mut out, *log_sigma, &|j| g[j / w] * ((sv[j] + sv[j]).exp() - T::one()));
            }
        }
        out
    }
}

fn column_sums<T: Real>(m: &[T], cols: usize) -> Vec<T> {
    let mut s = vec![T::zero(); cols];
    for row in m.chunks_exact(cols) {
        for (d, &v) in s.iter_mut().zip(row) {
            *d += v;
        }
    }
    s
}

/// `x[n, fan_in] · wᵀ + b` with `w` stored `[fan_out, fan_in]`.
pub fn dense_forward<T: Real>(x: &[T], w: &[T], b: &[T], n: usize, fan_in: usize, fan_out: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(n * fan_out);
    for _ in 0..n {
        out.extend_from_slice(b);
    }
    gemm(n, fan_in, fan_out, x, false, w, true, T::one(), &mut out);
    out
}

pub struct LstmForward<T> {
    /// `[n, d + hid]` concatenated input and previous hidden state.
    pub xh: Vec<T>,
    /// `[n, 4·hid]` activated gates (input, forget, candidate, output).
    pub gates: Vec<T>,
    /// `[n, hid]` tanh of the new cell state.
    pub tanh_c: Vec<T>,
    /// `[n, 2·hid]` new hidden state followed by new cell state.
    pub out: Vec<T>,
}

#[allow(clippy::too_many_arguments)]
pub fn lstm_forward<T: Real>(x: &[T], h: &[T], c: &[T], w: &[T], b: &[T], n: usize, d: usize, hid: usize) -> LstmForward<T> {
    let mut xh = Vec::with_capacity(n * (d + hid));
    for r in 0..n {
        xh.extend_from_slice(&x[r * d..(r + 1) * d]);
        xh.extend_from_slice(&h[r * hid..(r + 1) * hid]);
    }
    let mut gates = dense_forward(&xh, w, b, n, d + hid, 4 * hid);
    let mut out = vec![T::zero(); n * 2 * hid];
    let mut tanh_c = vec![T::zero(); n * hid];
    for r in 0..n {
        let g = &mut gates[r * 4 * hid..(r + 1) * 4 * hid];
        for j in 0..hid {
            let i_g = sigmoid(g[j]);
            let f_g = sigmoid(g[hid + j]);
            let c_g = g[2 * hid + j].tanh();
            let o_g = sigmoid(g[3 * hid + j]);
            g[j] = i_g;
            g[hid + j] = f_g;
            g[2 * hid + j] = c_g;
            g[3 * hid + j] = o_g;
            let c_new = f_g * c[r * hid + j] + i_g * c_g;
            let t = c_new.tanh();
            tanh_c[r * hid + j] = t;
            out[r * 2 * hid + j] = o_g * t;
            out[r * 2 * hid + hid + j] = c_new;
        }
    }
    LstmForward { xh, gates, tanh_c, out }
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Indices of component `j` of dimension `d` inside a mixture head row.
#[inline]
fn mix_idx(d: usize, j: usize, nz: usize, k: usize) -> (usize, usize, usize) {
    let base = d * k + j;
    (base, nz * k + base, 2 * nz * k + base)
}

fn component_log_terms<T: Real>(row: &[T], z: T, d: usize, nz: usize, k: usize) -> (T, [T; 16]) {
    assert!(k <= 16, "at most 16 mixture components");
    let mut log_joint = [T::zero(); 16];
    let lse_pi = log_sum_exp((0..k).map(|j| row[mix_idx(d, j, nz, k).0]));
    let c = T::lit(HALF_LN_2PI);
    for (j, slot) in log_joint.iter_mut().enumerate().take(k) {
        let (ip, im, is) = mix_idx(d, j, nz, k);
        let log_sigma = row[is];
        let u = (z - row[im]) * (-log_sigma).exp();
        *slot = row[ip] - lse_pi - T::lit(0.5) * u * u - log_sigma - c;
    }
    (lse_pi, log_joint)
}

pub(crate) fn mixture_dim_nll<T: Real>(row: &[T], z: T, d: usize, nz: usize, k: usize) -> T {
    let (_, lj) = component_log_terms(row, z, d, nz, k);
    -log_sum_exp(lj[..k].iter().copied())
}

/// Adds `scale · ∂nll_d/∂head` into `drow`; returns `scale · ∂nll_d/∂z`.
fn mixture_dim_grad<T: Real>(row: &[T], z: T, d: usize, nz: usize, k: usize, scale: T, drow: &mut [T]) -> T {
    let (lse_pi, lj) = component_log_terms(row, z, d, nz, k);
    let total = log_sum_exp(lj[..k].iter().copied());
    let mut dz = T::zero();
    for j in 0..k {
        let (ip, im, is) = mix_idx(d, j, nz, k);
        let resp = (lj[j] - total).exp();
        let pi = (row[ip] - lse_pi).exp();
        let inv_var = (-(row[is] + row[is])).exp();
        let diff = z - row[im];
        drow[ip] += scale * (pi - resp);
        drow[im] -= scale * resp * diff * inv_var;
        drow[is] -= scale * resp * (diff * diff * inv_var - T::one());
        dz += scale * resp * diff * inv_var;
    }
    dz
}
