//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Every differentiable operation appends one node holding its forward value
//! and the ids of its inputs. Node ids are assigned in execution order, so
//! the tape is topologically sorted by construction and `backward` is a
//! single reverse sweep.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{numel, strides, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `b` broadcast into the shape of `a`; `map[i]` is the `b` offset for output `i`.
    AddBcast(Var, Var, Rc<[usize]>),
    MulBcast(Var, Var, Rc<[usize]>),
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Abs(Var),
    Relu(Var),
    Gelu(Var),
    Sign,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_b: bool,
    },
    Softmax(Var),
    L2Normalize {
        x: Var,
        eps: T,
        norms: Vec<T>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Conv3x3 {
        x: Var,
        w: Var,
        b: Var,
    },
    Gather(Var, Rc<[usize]>),
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        inner: Vec<usize>,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed operations.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a trainable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Registers an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, false)
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

    /// Gradient accumulated by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor, zeros when the node did not receive any.
    pub fn grad_tensor(&self, v: Var) -> Tensor<T> {
        let shape = self.shape(v).to_vec();
        match self.grad(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("grad shape matches value"),
            None => Tensor::zeros(&shape),
        }
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric { op: name });
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, rg))
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("shapes {:?} and {:?} differ", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(name, value, op, &[a, b])
    }

    fn unary(&mut self, name: &'static str, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let value = self.value(x).map(f);
        self.push(name, value, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// `a + b` where `b` broadcasts into the shape of `a` (trailing-aligned,
    /// each `b` dimension equal to `a`'s or 1).
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let map: Rc<[usize]> = broadcast_map(self.shape(a), self.shape(b))?.into();
        let bd = self.data(b);
        let data = self.data(a).iter().zip(map.iter()).map(|(&x, &j)| x + bd[j]).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("add_bcast", value, Op::AddBcast(a, b, map), &[a, b])
    }

    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let map: Rc<[usize]> = broadcast_map(self.shape(a), self.shape(b))?.into();
        let bd = self.data(b);
        let data = self.data(a).iter().zip(map.iter()).map(|(&x, &j)| x * bd[j]).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("mul_bcast", value, Op::MulBcast(a, b, map), &[a, b])
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        self.unary("scale", x, Op::Scale(x, s), |v| v * s)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary("add_scalar", x, Op::AddScalar(x), |v| v + c)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, Op::Exp(x), T::exp)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary("abs", x, Op::Abs(x), T::abs)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, Op::Relu(x), |v| if v > T::zero() { v } else { T::zero() })
    }

    /// Gaussian-error linear unit, exact (erf) form.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let half = T::from_f64c(0.5);
        let inv_sqrt2 = T::from_f64c(std::f64::consts::FRAC_1_SQRT_2);
        self.unary("gelu", x, Op::Gelu(x), |v| half * v * (T::one() + (v * inv_sqrt2).erf()))
    }

    /// Sign with `sign(0) = 0`; its gradient is zero everywhere.
    pub fn sign(&mut self, x: Var) -> Result<Var> {
        self.unary("sign", x, Op::Sign, sign_of)
    }

    /// Matrix product over the last two axes.
    ///
    /// `a` is `[..., m, k]`; `b` is either `[k, n]` (shared by every batch
    /// entry) or `[..., k, n]` with the same leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::dim("matmul", format!("operands {sa:?} and {sb:?} must be at least 2-d")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let shared_b = lead_b.is_empty();
        if k != kb || (!shared_b && lead_a != lead_b) {
            return Err(Error::dim("matmul", format!("cannot multiply {sa:?} by {sb:?}")));
        }
        let batch = numel(lead_a);
        let mut out = vec![T::zero(); batch * m * n];
        let (ad, bd) = (self.data(a), self.data(b));
        for bi in 0..batch {
            let bo = if shared_b { 0 } else { bi * k * n };
            mm_acc(
                &ad[bi * m * k..(bi + 1) * m * k],
                &bd[bo..bo + k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = lead_a.to_vec();
        shape.extend([m, n]);
        let value = Tensor::new(shape, out)?;
        let op = Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            shared_b,
        };
        self.push("matmul", value, op, &[a, b])
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x);
        if !xs.is_finite() {
            return Err(Error::Numeric { op: "softmax" });
        }
        let d = last_dim(xs.shape());
        let mut out = xs.data().to_vec();
        for row in out.chunks_mut(d.max(1)) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let value = Tensor::new(xs.shape().to_vec(), out)?;
        self.push("softmax", value, Op::Softmax(x), &[x])
    }

    /// Divides each last-axis slice by `max(‖slice‖₂, eps)`.
    pub fn l2_normalize(&mut self, x: Var, eps: T) -> Result<Var> {
        let xs = self.value(x);
        let d = last_dim(xs.shape());
        let mut out = xs.data().to_vec();
        let mut norms = Vec::with_capacity(out.len() / d.max(1));
        for row in out.chunks_mut(d.max(1)) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            let denom = n.max(eps);
            for v in row.iter_mut() {
                *v /= denom;
            }
            norms.push(n);
        }
        let value = Tensor::new(xs.shape().to_vec(), out)?;
        self.push("l2_normalize", value, Op::L2Normalize { x, eps, norms }, &[x])
    }

    /// Layer normalization over the last axis with population variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let d = last_dim(self.shape(x));
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "affine shapes {:?}/{:?} do not match feature width {d}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let (g, b) = (self.data(gamma), self.data(beta));
        let xd = self.data(x);
        let dt = T::from_usize(d).unwrap();
        let mut out = Vec::with_capacity(xd.len());
        let mut xhat = Vec::with_capacity(xd.len());
        let mut rstd = Vec::with_capacity(xd.len() / d);
        for row in xd.chunks(d) {
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let r = T::one() / (var + eps).sqrt();
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
            rstd.push(r);
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        };
        self.push("layer_norm", value, op, &[x, gamma, beta])
    }

    /// 3×3 cross-correlation, stride 1, zero padding 1.
    ///
    /// `x` is `[cin, h, w]`, `w` is `[cout, cin, 3, 3]`, `b` is `[cout]`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 4 || sw[2] != 3 || sw[3] != 3 || sw[1] != sx[0] {
            return Err(Error::dim("conv3x3", format!("input {sx:?} incompatible with kernel {sw:?}")));
        }
        if self.shape(b) != [sw[0]] {
            return Err(Error::dim("conv3x3", format!("bias {:?} for {} outputs", self.shape(b), sw[0])));
        }
        let (cin, h, wd) = (sx[0], sx[1], sx[2]);
        let cout = sw[0];
        let (xd, wdat, bd) = (self.data(x), self.data(w), self.data(b));
        let mut out = vec![T::zero(); cout * h * wd];
        for co in 0..cout {
            let plane = &mut out[co * h * wd..(co + 1) * h * wd];
            plane.iter_mut().for_each(|v| *v = bd[co]);
            for ci in 0..cin {
                let src = &xd[ci * h * wd..(ci + 1) * h * wd];
                let kern = &wdat[(co * cin + ci) * 9..(co * cin + ci + 1) * 9];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let kv = kern[ky * 3 + kx];
                        let (y0, y1) = tap_range(ky, h);
                        let (x0, x1) = tap_range(kx, wd);
                        for y in y0..y1 {
                            let sy = y + ky - 1;
                            let orow = &mut plane[y * wd..(y + 1) * wd];
                            let irow = &src[sy * wd..(sy + 1) * wd];
                            for xx in x0..x1 {
                                orow[xx] += kv * irow[xx + kx - 1];
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![cout, h, wd], out)?;
        self.push("conv3x3", value, Op::Conv3x3 { x, w, b }, &[x, w, b])
    }

    /// `out[i] = x[index[i]]`, reshaped to `shape`. Backward scatter-adds.
    pub fn gather(&mut self, x: Var, index: Rc<[usize]>, shape: &[usize]) -> Result<Var> {
        if numel(shape) != index.len() {
            return Err(Error::dim("gather", format!("{} indices for shape {shape:?}", index.len())));
        }
        let xd = self.data(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= xd.len()) {
            return Err(Error::dim("gather", format!("index {bad} out of range {}", xd.len())));
        }
        let data = index.iter().map(|&i| xd[i]).collect();
        let value = Tensor::new(shape.to_vec(), data)?;
        self.push("gather", value, Op::Gather(x, index), &[x])
    }

    /// Axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let (index, shape) = permute_index(self.shape(x), axes)?;
        self.gather(x, index.into(), &shape)
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::dim("transpose", "needs at least 2 axes"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    /// Contiguous sub-range `[start, start + len)` along `dim`.
    pub fn narrow(&mut self, x: Var, dim: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if dim >= shape.len() || start + len > shape[dim] {
            return Err(Error::dim("narrow", format!("range {start}+{len} on axis {dim} of {shape:?}")));
        }
        let outer = numel(&shape[..dim]);
        let inner = numel(&shape[dim + 1..]);
        let mut index = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * shape[dim] * inner;
            index.extend(base + start * inner..base + (start + len) * inner);
        }
        let mut out_shape = shape;
        out_shape[dim] = len;
        self.gather(x, index.into(), &out_shape)
    }

    /// Splits `dim` into two equal halves.
    pub fn split_half(&mut self, x: Var, dim: usize) -> Result<(Var, Var)> {
        let shape = self.shape(x);
        if dim >= shape.len() || shape[dim] % 2 != 0 {
            return Err(Error::dim(
                "split_half",
                format!("axis {dim} of {shape:?} is not of even length"),
            ));
        }
        let half = shape[dim] / 2;
        Ok((self.narrow(x, dim, 0, half)?, self.narrow(x, dim, half, half)?))
    }

    /// Concatenation along `dim`; all other axes must agree.
    pub fn concat(&mut self, inputs: &[Var], dim: usize) -> Result<Var> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| Error::dim("concat", "no inputs"))?)
            .to_vec();
        if dim >= first.len() {
            return Err(Error::dim("concat", format!("axis {dim} out of range for {first:?}")));
        }
        let mut inner = Vec::with_capacity(inputs.len());
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len() || s.iter().enumerate().any(|(i, &d)| i != dim && d != first[i]) {
                return Err(Error::dim("concat", format!("{s:?} does not match {first:?} off axis {dim}")));
            }
            inner.push(numel(&s[dim..]));
            total += s[dim];
        }
        let outer = numel(&first[..dim]);
        let mut data = Vec::with_capacity(outer * inner.iter().sum::<usize>());
        for o in 0..outer {
            for (&v, &chunk) in inputs.iter().zip(&inner) {
                data.extend_from_slice(&self.data(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[dim] = total;
        let value = Tensor::new(shape, data)?;
        let op = Op::Concat {
            inputs: inputs.to_vec(),
            outer,
            inner,
        };
        self.push("concat", value, op, inputs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let d = self.data(x);
        let s = d.iter().copied().sum::<T>() / T::from_usize(d.len().max(1)).unwrap();
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Populates gradients of every node that depends on a trainable leaf.
    ///
    /// Gradients accumulate (`+=`) over every use of a node. Calling
    /// `backward` again discards the previous gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |ga| add_into(ga, g));
                self.acc(grads, *b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |ga| add_into(ga, g));
                self.acc(grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(d, &s)| *d -= s));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.acc(grads, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bd[i];
                    }
                });
                self.acc(grads, *b, |gb| {
                    for i in 0..g.len() {
                        gb[i] += g[i] * ad[i];
                    }
                });
            }
            Op::AddBcast(a, b, map) => {
                self.acc(grads, *a, |ga| add_into(ga, g));
                self.acc(grads, *b, |gb| {
                    for (i, &j) in map.iter().enumerate() {
                        gb[j] += g[i];
                    }
                });
            }
            Op::MulBcast(a, b, map) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.acc(grads, *a, |ga| {
                    for (i, &j) in map.iter().enumerate() {
                        ga[i] += g[i] * bd[j];
                    }
                });
                self.acc(grads, *b, |gb| {
                    for (i, &j) in map.iter().enumerate() {
                        gb[j] += g[i] * ad[i];
                    }
                });
            }
            Op::Scale(x, s) => self.acc(grads, *x, |gx| {
                gx.iter_mut().zip(g).for_each(|(d, &v)| *d += v * *s);
            }),
            Op::AddScalar(x) | Op::Reshape(x) => self.acc(grads, *x, |gx| add_into(gx, g)),
            Op::Exp(x) => self.acc(grads, *x, |gx| {
                for i in 0..g.len() {
                    gx[i] += g[i] * out[i];
                }
            }),
            Op::Abs(x) => {
                let xd = self.data(*x);
                self.acc(grads, *x, |gx| {
                    for i in 0..g.len() {
                        gx[i] += g[i] * sign_of(xd[i]);
                    }
                });
            }
            Op::Relu(x) => {
                let xd = self.data(*x);
                self.acc(grads, *x, |gx| {
                    for i in 0..g.len() {
                        if xd[i] > T::zero() {
                            gx[i] += g[i];
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xd = self.data(*x);
                let half = T::from_f64c(0.5);
                let inv_sqrt2 = T::from_f64c(std::f64::consts::FRAC_1_SQRT_2);
                let inv_sqrt_2pi = T::from_f64c(0.398_942_280_401_432_7);
                self.acc(grads, *x, |gx| {
                    for i in 0..g.len() {
                        let v = xd[i];
                        let cdf = half * (T::one() + (v * inv_sqrt2).erf());
                        let pdf = inv_sqrt_2pi * (-half * v * v).exp();
                        gx[i] += g[i] * (cdf + v * pdf);
                    }
                });
            }
            Op::Sign => {}
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_b,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.acc(grads, *a, |ga| {
                    for bi in 0..*batch {
                        let bo = if *shared_b { 0 } else { bi * k * n };
                        mm_nt_acc(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &bd[bo..bo + k * n],
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                });
                self.acc(grads, *b, |gb| {
                    for bi in 0..*batch {
                        let bo = if *shared_b { 0 } else { bi * k * n };
                        mm_tn_acc(
                            &ad[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut gb[bo..bo + k * n],
                            m,
                            k,
                            n,
                        );
                    }
                });
            }
            Op::Softmax(x) => {
                let d = last_dim(node.value.shape()).max(1);
                self.acc(grads, *x, |gx| {
                    for r in 0..g.len() / d {
                        let (gy, y) = (&g[r * d..(r + 1) * d], &out[r * d..(r + 1) * d]);
                        let dot: T = gy.iter().zip(y).map(|(&a, &b)| a * b).sum();
                        for j in 0..d {
                            gx[r * d + j] += y[j] * (gy[j] - dot);
                        }
                    }
                });
            }
            Op::L2Normalize { x, eps, norms } => {
                let d = last_dim(node.value.shape()).max(1);
                self.acc(grads, *x, |gx| {
                    for (r, &nrm) in norms.iter().enumerate() {
                        let (gy, y) = (&g[r * d..(r + 1) * d], &out[r * d..(r + 1) * d]);
                        if nrm > *eps {
                            let dot: T = gy.iter().zip(y).map(|(&a, &b)| a * b).sum();
                            for j in 0..d {
                                gx[r * d + j] += (gy[j] - y[j] * dot) / nrm;
                            }
                        } else {
                            for j in 0..d {
                                gx[r * d + j] += gy[j] / *eps;
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = last_dim(node.value.shape());
                let dt = T::from_usize(d).unwrap();
                let gam = self.data(*gamma);
                self.acc(grads, *gamma, |gg| {
                    for (i, (&gv, &h)) in g.iter().zip(xhat.iter()).enumerate() {
                        gg[i % d] += gv * h;
                    }
                });
                self.acc(grads, *beta, |gb| {
                    for (i, &gv) in g.iter().enumerate() {
                        gb[i % d] += gv;
                    }
                });
                self.acc(grads, *x, |gx| {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let row = r * d..(r + 1) * d;
                        let (gy, h) = (&g[row.clone()], &xhat[row]);
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let dh = gy[j] * gam[j];
                            m1 += dh;
                            m2 += dh * h[j];
                        }
                        m1 /= dt;
                        m2 /= dt;
                        for j in 0..d {
                            gx[r * d + j] += rs * (gy[j] * gam[j] - m1 - h[j] * m2);
                        }
                    }
                });
            }
            Op::Conv3x3 { x, w, b } => self.conv_backward(*x, *w, *b, g, grads),
            Op::Gather(x, index) => self.acc(grads, *x, |gx| {
                for (i, &src) in index.iter().enumerate() {
                    gx[src] += g[i];
                }
            }),
            Op::Concat { inputs, outer, inner } => {
                let stride: usize = inner.iter().sum();
                let mut off = 0;
                for (&v, &chunk) in inputs.iter().zip(inner) {
                    self.acc(grads, v, |gv| {
                        for o in 0..*outer {
                            let src = &g[o * stride + off..o * stride + off + chunk];
                            add_into(&mut gv[o * chunk..(o + 1) * chunk], src);
                        }
                    });
                    off += chunk;
                }
            }
            Op::Sum(x) => self.acc(grads, *x, |gx| gx.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => {
                let share = g[0] / T::from_usize(self.data(*x).len().max(1)).unwrap();
                self.acc(grads, *x, |gx| gx.iter_mut().for_each(|d| *d += share));
            }
        }
    }

    fn conv_backward(&self, x: Var, w: Var, b: Var, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let sx = self.shape(x);
        let (cin, h, wd) = (sx[0], sx[1], sx[2]);
        let cout = self.shape(w)[0];
        let (xd, wdat) = (self.data(x), self.data(w));
        let hw = h * wd;
        self.acc(grads, b, |gb| {
            for co in 0..cout {
                gb[co] += g[co * hw..(co + 1) * hw].iter().copied().sum();
            }
        });
        self.acc(grads, w, |gw| {
            for co in 0..cout {
                let gp = &g[co * hw..(co + 1) * hw];
                for ci in 0..cin {
                    let src = &xd[ci * hw..(ci + 1) * hw];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (y0, y1) = tap_range(ky, h);
                            let (x0, x1) = tap_range(kx, wd);
                            let mut acc = T::zero();
                            for y in y0..y1 {
                                let sy = y + ky - 1;
                                for xx in x0..x1 {
                                    acc += gp[y * wd + xx] * src[sy * wd + xx + kx - 1];
                                }
                            }
                            gw[(co * cin + ci) * 9 + ky * 3 + kx] += acc;
                        }
                    }
                }
            }
        });
        self.acc(grads, x, |gx| {
            for co in 0..cout {
                let gp = &g[co * hw..(co + 1) * hw];
                for ci in 0..cin {
                    let kern = &wdat[(co * cin + ci) * 9..(co * cin + ci + 1) * 9];
                    let dst = &mut gx[ci * hw..(ci + 1) * hw];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let kv = kern[ky * 3 + kx];
                            let (y0, y1) = tap_range(ky, h);
                            let (x0, x1) = tap_range(kx, wd);
                            for y in y0..y1 {
                                let sy = y + ky - 1;
                                for xx in x0..x1 {
                                    dst[sy * wd + xx + kx - 1] += kv * gp[y * wd + xx];
                                }
                            }
                        }
                    }
                }
            }
        });
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
        f(slot);
    }
}

fn sign_of<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

/// Output rows `y` for which kernel tap `k` (0..3) reads inside `[0, len)`.
fn tap_range(k: usize, len: usize) -> (usize, usize) {
    match k {
        0 => (1.min(len), len),
        1 => (0, len),
        _ => (0, len.saturating_sub(1)),
    }
}

/// `c[m,n] += a[m,k] · b[k,n]`.
fn mm_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// `c[m,k] += g[m,n] · b[k,n]ᵀ`.
fn mm_nt_acc<T: Scalar>(g: &[T], b: &[T], c: &mut [T], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for j in 0..n {
                acc += grow[j] * brow[j];
            }
            c[i * k + p] += acc;
        }
    }
}

/// `c[k,n] += a[m,k]ᵀ · g[m,n]`.
fn mm_tn_acc<T: Scalar>(a: &[T], g: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * grow[j];
            }
        }
    }
}

/// For each element of a tensor shaped `a`, the flat offset of the
/// broadcast partner in a tensor shaped `b`.
pub fn broadcast_map(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let fail = || Error::dim("broadcast", format!("{b:?} does not broadcast into {a:?}"));
    if b.len() > a.len() {
        return Err(fail());
    }
    let off = a.len() - b.len();
    let bs = strides(b);
    let mut eff = vec![0usize; a.len()];
    for (i, &bd) in b.iter().enumerate() {
        if bd != a[off + i] && bd != 1 {
            return Err(fail());
        }
        if bd != 1 {
            eff[off + i] = bs[i];
        }
    }
    Ok(map_indices(a, &eff))
}

/// Flat offsets obtained by walking `shape` in row-major order with
/// per-axis source strides `src_strides`.
pub fn map_indices(shape: &[usize], src_strides: &[usize]) -> Vec<usize> {
    let total = numel(shape);
    let mut out = Vec::with_capacity(total);
    if total == 0 {
        return out;
    }
    let mut idx = vec![0usize; shape.len()];
    let mut off = 0usize;
    for _ in 0..total {
        out.push(off);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < shape[d] {
                break;
            }
            off -= src_strides[d] * shape[d];
            idx[d] = 0;
        }
    }
    out
}

/// Gather indices (and the resulting shape) for an axis permutation.
pub fn permute_index(shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut seen = vec![false; shape.len()];
    if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
        return Err(Error::dim("permute", format!("{axes:?} is not a permutation of {} axes", shape.len())));
    }
    let st = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src: Vec<usize> = axes.iter().map(|&a| st[a]).collect();
    Ok((map_indices(&out_shape, &src), out_shape))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_hand_expansion() {
        let mut tp = Tape::new();
        let a = tp.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = tp.constant(t(&[2, 2], &[5., 6., 7., 8.]));
        let c = tp.matmul(a, b).unwrap();
        assert_eq!(tp.value(c).data(), &[19., 22., 43., 50.]);
    }

    #[test]
    fn matmul_identity_and_scalar_case() {
        let mut tp = Tape::new();
        let a = tp.constant(t(&[3, 3], &[1., -2., 3., 0.5, 7., -1., 2., 2., 9.]));
        let i = tp.constant(Tensor::identity(3));
        let c = tp.matmul(a, i).unwrap();
        assert_eq!(tp.value(c), tp.value(a));
        let x = tp.constant(t(&[1, 1], &[3.0]));
        let y = tp.constant(t(&[1, 1], &[-4.0]));
        let z = tp.matmul(x, y).unwrap();
        assert_eq!(tp.value(z).data(), &[-12.0]);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let mut tp = Tape::<f64>::new();
        let a = tp.constant(Tensor::zeros(&[2, 3]));
        let b = tp.constant(Tensor::zeros(&[2, 3]));
        let err = tp.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_values() {
        let mut tp = Tape::new();
        let x = tp.constant(t(&[2], &[0., 0.]));
        let s = tp.softmax(x).unwrap();
        assert_eq!(tp.value(s).data(), &[0.5, 0.5]);
        let x = tp.constant(t(&[3], &[1., 2., 3.]));
        let s = tp.softmax(x).unwrap();
        let want = [0.09003, 0.24473, 0.66524];
        for (g, w) in tp.value(s).data().iter().zip(want) {
            assert!((g - w).abs() < 1e-5);
        }
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut tp = Tape::new();
        let x = tp.constant(t(&[2], &[f64::NAN, 0.]));
        assert!(matches!(tp.softmax(x), Err(Error::Numeric { .. })));
    }

    #[test]
    fn l2_normalize_cases() {
        let mut tp = Tape::new();
        for (input, want) in [(vec![3., 4.], vec![0.6, 0.8]), (vec![0., 0.], vec![0., 0.]), (vec![5.], vec![1.])] {
            let x = tp.constant(t(&[input.len()], &input));
            let y = tp.l2_normalize(x, 1e-12).unwrap();
            for (g, w) in tp.value(y).data().iter().zip(&want) {
                assert!((g - w).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn layer_norm_cases() {
        let mut tp = Tape::new();
        let x = tp.constant(t(&[1, 2], &[1., 3.]));
        let g = tp.constant(Tensor::ones(&[2]));
        let b = tp.constant(Tensor::zeros(&[2]));
        let y = tp.layer_norm(x, g, b, 1e-5).unwrap();
        assert!((tp.value(y).data()[0] + 1.0).abs() < 1e-4);
        assert!((tp.value(y).data()[1] - 1.0).abs() < 1e-4);

        let x = tp.constant(Tensor::full(&[2, 4], 7.0));
        let g = tp.constant(Tensor::ones(&[4]));
        let b = tp.constant(t(&[4], &[0.1, 0.2, 0.3, 0.4]));
        let y = tp.layer_norm(x, g, b, 1e-5).unwrap();
        assert_eq!(tp.value(y).data(), &[0.1, 0.2, 0.3, 0.4, 0.1, 0.2, 0.3, 0.4]);

        let x = tp.constant(t(&[1, 3], &[1., -5., 2.]));
        let g = tp.constant(Tensor::zeros(&[3]));
        let y = tp.layer_norm(x, g, b, 1e-5);
        assert!(y.is_err(), "beta of width 4 must not match 3 features");
    }

    #[test]
    fn conv_counts_valid_taps() {
        let mut tp = Tape::<f64>::new();
        let x = tp.constant(Tensor::ones(&[1, 3, 3]));
        let w = tp.constant(Tensor::ones(&[1, 1, 3, 3]));
        let b = tp.constant(Tensor::zeros(&[1]));
        let y = tp.conv3x3(x, w, b).unwrap();
        let d = tp.value(y).data();
        assert_eq!(d[4], 9.0);
        assert_eq!(d[0], 4.0);
        assert_eq!(d[1], 6.0);
    }

    #[test]
    fn conv_constant_field_and_delta_kernel() {
        let mut tp = Tape::new();
        let x = tp.constant(Tensor::full(&[2, 5, 5], 1.5));
        let kern: Vec<f64> = (0..18).map(|i| (i as f64) * 0.1 - 0.7).collect();
        let s: f64 = kern.iter().sum();
        let w = tp.constant(t(&[1, 2, 3, 3], &kern));
        let b = tp.constant(Tensor::zeros(&[1]));
        let y = tp.conv3x3(x, w, b).unwrap();
        let d = tp.value(y).data();
        for yy in 1..4 {
            for xx in 1..4 {
                assert!((d[yy * 5 + xx] - 1.5 * s).abs() < 1e-12);
            }
        }

        // Delta kernels mixing channel 0 with weight 2 and channel 1 with weight -1.
        let mut dk = vec![0.0; 18];
        dk[4] = 2.0;
        dk[9 + 4] = -1.0;
        let xin: Vec<f64> = (0..18).map(|i| (i as f64).sin()).collect();
        let x = tp.constant(t(&[2, 3, 3], &xin));
        let w = tp.constant(t(&[1, 2, 3, 3], &dk));
        let y = tp.conv3x3(x, w, b).unwrap();
        for p in 0..9 {
            assert!((tp.value(y).data()[p] - (2.0 * xin[p] - xin[9 + p])).abs() < 1e-15);
        }

        let bad = tp.constant(Tensor::zeros(&[1, 3, 3, 3]));
        assert!(matches!(tp.conv3x3(x, bad, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn elementwise_values() {
        let mut tp = Tape::new();
        let x = tp.constant(t(&[3], &[0., -2., 3.]));
        let e = tp.exp(x).unwrap();
        assert_eq!(tp.value(e).data()[0], 1.0);
        let r = tp.relu(x).unwrap();
        assert_eq!(tp.value(r).data(), &[0., 0., 3.]);

        let d = tp.constant(t(&[1], &[-0.5]));
        let s = tp.sign(d).unwrap();
        let a = tp.abs(d).unwrap();
        let na = tp.scale(a, -1.0).unwrap();
        let ex = tp.exp(na).unwrap();
        let om = tp.scale(ex, -1.0).unwrap();
        let om = tp.add_scalar(om, 1.0).unwrap();
        let out = tp.mul(s, om).unwrap();
        assert!((tp.value(out).data()[0] + 0.39347).abs() < 1e-5);
    }

    #[test]
    fn split_concat_round_trip() {
        let mut tp = Tape::new();
        let x = tp.constant(t(&[1, 4], &[1., 2., 3., 4.]));
        let (a, b) = tp.split_half(x, 1).unwrap();
        assert_eq!(tp.value(a).data(), &[1., 2.]);
        assert_eq!(tp.value(b).data(), &[3., 4.]);
        let y = tp.concat(&[a, b], 1).unwrap();
        assert_eq!(tp.value(y), tp.value(x));

        let x = tp.constant(Tensor::zeros(&[2, 3]));
        assert!(tp.split_half(x, 1).is_err());
    }

    #[test]
    fn backward_basics() {
        let mut tp = Tape::new();
        let x = tp.leaf(t(&[3], &[1., -2., 0.5]));
        let s = tp.sum(x).unwrap();
        tp.backward(s).unwrap();
        assert_eq!(tp.grad(x).unwrap(), &[1., 1., 1.]);

        let mut tp = Tape::new();
        let x = tp.leaf(t(&[3], &[1., -2., 0.5]));
        let sq = tp.mul(x, x).unwrap();
        let s = tp.sum(sq).unwrap();
        tp.backward(s).unwrap();
        assert_eq!(tp.grad(x).unwrap(), &[2., -4., 1.]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tp = Tape::new();
        let x = tp.leaf(t(&[2], &[1., 2.]));
        assert!(matches!(tp.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn sign_has_no_gradient() {
        let mut tp = Tape::new();
        let x = tp.leaf(t(&[3], &[-1., 0., 2.]));
        let s = tp.sign(x).unwrap();
        let y = tp.mul(s, x).unwrap();
        let l = tp.sum(y).unwrap();
        tp.backward(l).unwrap();
        assert_eq!(tp.grad(x).unwrap(), &[-1., 0., 1.]);
    }

    #[test]
    fn permute_matches_manual_transpose() {
        let (idx, shape) = permute_index(&[2, 3], &[1, 0]).unwrap();
        assert_eq!(shape, vec![3, 2]);
        assert_eq!(idx, vec![0, 3, 1, 4, 2, 5]);
        assert!(permute_index(&[2, 3], &[0, 0]).is_err());
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_map(&[2, 3], &[3]).unwrap(), vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(broadcast_map(&[2, 3], &[2, 1]).unwrap(), vec![0, 0, 0, 1, 1, 1]);
        assert!(broadcast_map(&[2, 3], &[2]).is_err());
    }
}
