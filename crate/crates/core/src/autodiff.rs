//! Reverse-mode automatic differentiation over a per-forward-pass tape.
//!
//! Every operation appends one record holding its output value and the
//! handles of its inputs. [`Tape::backward`] walks the records once, newest
//! first, and accumulates gradients into every leaf created with
//! `requires_grad`. Intermediate adjoints are dropped when the pass ends.

use crate::error::{Error, Result};
use crate::tensor::{self, BinaryKind, Broadcast, Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Binary(BinaryKind, Var, Var),
    Scale(Var, T),
    Offset(Var),
    Linear(Var, Var, Option<Var>),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    PerPixelLinear(Var, Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Sqrt(Var),
    Abs(Var),
    GlobalAvgPool(Var),
    SpatialSum(Var),
    ChannelMean(Var),
    Concat(Vec<Var>),
    Sum(Var),
    Mean(Var),
    StopGradient,
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    MaxPool2(Var, Vec<usize>),
    Upsample2(Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Computation record for one forward pass.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    backward_done: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate<T: Real>(adj: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut adj[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += *x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`]; zeros for a
    /// trainable leaf the root does not depend on.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Clears every accumulated gradient and permits another backward pass.
    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
        self.backward_done = false;
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let out = tensor::binary(kind, self.value(a), self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        let out = self.value(x).map(|v| v * k);
        let rg = self.needs(&[x]);
        self.push(out, Op::Scale(x, k), rg)
    }

    /// `x + k` elementwise.
    pub fn offset(&mut self, x: Var, k: T) -> Var {
        let out = self.value(x).map(|v| v + k);
        let rg = self.needs(&[x]);
        self.push(out, Op::Offset(x), rg)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = tensor::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut ins = vec![x, w];
        ins.extend(b);
        let rg = self.needs(&ins);
        Ok(self.push(out, Op::Linear(x, w, b), rg))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let out = tensor::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let mut ins = vec![x, w];
        ins.extend(b);
        let rg = self.needs(&ins);
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            rg,
        ))
    }

    pub fn per_pixel_linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = tensor::per_pixel_linear(self.value(x), self.value(w), self.value(b))?;
        let rg = self.needs(&[x, w, b]);
        Ok(self.push(out, Op::PerPixelLinear(x, w, b), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.needs(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(tensor::sigmoid);
        let rg = self.needs(&[x]);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.sqrt());
        let rg = self.needs(&[x]);
        self.push(out, Op::Sqrt(x), rg)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.abs());
        let rg = self.needs(&[x]);
        self.push(out, Op::Abs(x), rg)
    }

    /// `B×C×H×W → B×C` spatial mean.
    pub fn global_average_pool(&mut self, x: Var) -> Result<Var> {
        let out = tensor::global_average_pool(self.value(x))?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::GlobalAvgPool(x), rg))
    }

    /// `B×C×H×W → B×C` spatial sum.
    pub fn spatial_sum(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let data = self.value(x).data().chunks(h * w).map(|p| p.iter().copied().sum()).collect();
        let out = Tensor::new(&[b, c], data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::SpatialSum(x), rg))
    }

    /// `B×C×H×W → B×1×H×W` mean over channels.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let inv = T::one() / T::c(c as f64);
        let src = self.value(x).data();
        let mut data = vec![T::zero(); b * hw];
        for bi in 0..b {
            let dst = &mut data[bi * hw..(bi + 1) * hw];
            for ci in 0..c {
                for (d, &s) in dst.iter_mut().zip(&src[(bi * c + ci) * hw..][..hw]) {
                    *d += s;
                }
            }
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        let out = Tensor::new(&[b, 1, h, w], data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::ChannelMean(x), rg))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = tensor::concat_channels(&vals)?;
        let rg = self.needs(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s: T = v.data().iter().copied().sum::<T>() / T::c(v.len() as f64);
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Identity on values; gradients never flow into `x` through the result.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let out = self.value(x).clone();
        self.push(out, Op::StopGradient, false)
    }

    /// Instance normalization with per-channel affine `gamma`, `beta`.
    ///
    /// `B×C` input normalizes over the C features of each sample;
    /// `B×C×H×W` input normalizes over the spatial plane of each
    /// sample-channel. A normalization group of one element is rejected.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let (channels, group) = match shape[..] {
            [_, c] => (c, c),
            [_, c, h, w] => (c, h * w),
            _ => return Err(Error::Shape(format!("instance norm needs 2-D or 4-D input, got {shape:?}"))),
        };
        if group < 2 {
            return Err(Error::Shape(
                "instance norm over a single element: variance undefined".into(),
            ));
        }
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.len() != channels || bv.len() != channels {
            return Err(Error::Shape(format!(
                "instance norm affine length {}/{} vs {channels} channels",
                gv.len(),
                bv.len()
            )));
        }
        let per_elem = shape.len() == 2;
        let eps = T::c(eps);
        let m = T::c(group as f64);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        let mut inv_std = Vec::with_capacity(xv.len() / group);
        for (gi, chunk) in xv.data().chunks(group).enumerate() {
            let mean = chunk.iter().copied().sum::<T>() / m;
            let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / m;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            let range = gi * group..(gi + 1) * group;
            let (xh, o) = (&mut xhat[range.clone()], &mut out[range]);
            if per_elem {
                for j in 0..group {
                    xh[j] = (chunk[j] - mean) * inv;
                    o[j] = gv.data()[j] * xh[j] + bv.data()[j];
                }
            } else {
                let (ga, be) = (gv.data()[gi % channels], bv.data()[gi % channels]);
                for ((xh, o), &v) in xh.iter_mut().zip(o.iter_mut()).zip(chunk) {
                    *xh = (v - mean) * inv;
                    *o = ga * *xh + be;
                }
            }
        }
        let out = Tensor::new(&shape, out)?;
        let rg = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (out, arg) = tensor::max_pool2(self.value(x))?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::MaxPool2(x, arg), rg))
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let out = tensor::upsample2(self.value(x))?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::Upsample2(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Propagates gradients from a one-element root to every trainable leaf.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::Autodiff(format!(
                "backward root must be a scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        if self.backward_done {
            return Err(Error::Autodiff(
                "backward already ran on this tape; call zero_grad first".into(),
            ));
        }
        self.backward_done = true;
        let mut adj: Vec<Option<Tensor<T>>> = (0..=root.0).map(|_| None).collect();
        if self.nodes[root.0].requires_grad {
            adj[root.0] = Some(Tensor::ones(self.nodes[root.0].value.shape()));
        }
        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                accumulate(&mut self.grads, Var(i), g);
                continue;
            }
            self.propagate(i, g, &mut adj)?;
        }
        // trainable leaves the root does not reach still get a zero grad
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && self.grads[i].is_none() {
                self.grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: Tensor<T>, adj: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::Binary(kind, a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (ga, gb) = binary_backward(*kind, av, bv, &g)?;
                if rg(*a) {
                    accumulate(adj, *a, ga);
                }
                if rg(*b) {
                    accumulate(adj, *b, gb);
                }
            }
            Op::Scale(x, k) => accumulate(adj, *x, g.map(|v| v * *k)),
            Op::Offset(x) => accumulate(adj, *x, g),
            Op::Linear(x, w, b) => {
                let (xv, wv) = (val(*x), val(*w));
                let (batch, cin) = xv.dims2()?;
                let (_, cout) = wv.dims2()?;
                if rg(*x) {
                    let mut dx = Tensor::zeros(xv.shape());
                    T::gemm(batch, cout, cin, g.data(), (cout as isize, 1), wv.data(), (1, cout as isize), T::zero(), dx.data_mut(), (cin as isize, 1));
                    accumulate(adj, *x, dx);
                }
                if rg(*w) {
                    let mut dw = Tensor::zeros(wv.shape());
                    T::gemm(cin, batch, cout, xv.data(), (1, cin as isize), g.data(), (cout as isize, 1), T::zero(), dw.data_mut(), (cout as isize, 1));
                    accumulate(adj, *w, dw);
                }
                if let Some(b) = b.filter(|b| rg(*b)) {
                    let mut db = Tensor::zeros(&[cout]);
                    for row in g.data().chunks(cout) {
                        for (d, &r) in db.data_mut().iter_mut().zip(row) {
                            *d += r;
                        }
                    }
                    accumulate(adj, b, db);
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (dx, dw, db) = tensor::conv2d_backward(val(*x), val(*w), &g, *stride, *pad)?;
                if rg(*x) {
                    accumulate(adj, *x, dx);
                }
                if rg(*w) {
                    accumulate(adj, *w, dw);
                }
                if let Some(b) = b.filter(|b| rg(*b)) {
                    accumulate(adj, b, db);
                }
            }
            Op::PerPixelLinear(x, w, b) => {
                let (xv, wv) = (val(*x), val(*w));
                let (batch, c, h, wd) = xv.dims4()?;
                let (_, n) = wv.dims2()?;
                let hw = h * wd;
                if rg(*x) {
                    let mut dx = Tensor::zeros(xv.shape());
                    for bi in 0..batch {
                        T::gemm(c, n, hw, wv.data(), (n as isize, 1), &g.data()[bi * n * hw..(bi + 1) * n * hw], (hw as isize, 1), T::zero(), &mut dx.data_mut()[bi * c * hw..(bi + 1) * c * hw], (hw as isize, 1));
                    }
                    accumulate(adj, *x, dx);
                }
                if rg(*w) {
                    let mut dw = Tensor::zeros(wv.shape());
                    for bi in 0..batch {
                        T::gemm(c, hw, n, &xv.data()[bi * c * hw..(bi + 1) * c * hw], (hw as isize, 1), &g.data()[bi * n * hw..(bi + 1) * n * hw], (1, hw as isize), T::one(), dw.data_mut(), (n as isize, 1));
                    }
                    accumulate(adj, *w, dw);
                }
                if rg(*b) {
                    let mut db = Tensor::zeros(&[n]);
                    for (j, plane) in g.data().chunks(hw).enumerate() {
                        db.data_mut()[j % n] += plane.iter().copied().sum::<T>();
                    }
                    accumulate(adj, *b, db);
                }
            }
            Op::Relu(x) => {
                let xv = val(*x);
                let mut d = g;
                for (d, &v) in d.data_mut().iter_mut().zip(xv.data()) {
                    if v <= T::zero() {
                        *d = T::zero();
                    }
                }
                accumulate(adj, *x, d);
            }
            Op::Sigmoid(x) => {
                let mut d = g;
                for (d, &y) in d.data_mut().iter_mut().zip(node.value.data()) {
                    *d *= y * (T::one() - y);
                }
                accumulate(adj, *x, d);
            }
            Op::Sqrt(x) => {
                let two = T::c(2.0);
                let mut d = g;
                for (d, &y) in d.data_mut().iter_mut().zip(node.value.data()) {
                    *d /= two * y;
                }
                accumulate(adj, *x, d);
            }
            Op::Abs(x) => {
                let mut d = g;
                for (d, &v) in d.data_mut().iter_mut().zip(val(*x).data()) {
                    *d = if v > T::zero() {
                        *d
                    } else if v < T::zero() {
                        -*d
                    } else {
                        T::zero()
                    };
                }
                accumulate(adj, *x, d);
            }
            Op::GlobalAvgPool(x) | Op::SpatialSum(x) => {
                let xv = val(*x);
                let (_, _, h, w) = xv.dims4()?;
                let hw = h * w;
                let k = if matches!(node.op, Op::GlobalAvgPool(_)) {
                    T::one() / T::c(hw as f64)
                } else {
                    T::one()
                };
                let mut d = Tensor::zeros(xv.shape());
                for (plane, &gv) in d.data_mut().chunks_mut(hw).zip(g.data()) {
                    plane.fill(gv * k);
                }
                accumulate(adj, *x, d);
            }
            Op::ChannelMean(x) => {
                let xv = val(*x);
                let (b, c, h, w) = xv.dims4()?;
                let hw = h * w;
                let inv = T::one() / T::c(c as f64);
                let mut d = Tensor::zeros(xv.shape());
                for bi in 0..b {
                    let src = &g.data()[bi * hw..(bi + 1) * hw];
                    for ci in 0..c {
                        for (dd, &s) in d.data_mut()[(bi * c + ci) * hw..][..hw].iter_mut().zip(src) {
                            *dd = s * inv;
                        }
                    }
                }
                accumulate(adj, *x, d);
            }
            Op::Concat(parts) => {
                let batch = node.value.shape()[0];
                let inner: usize = node.value.shape()[2..].iter().product();
                let total = node.value.shape()[1] * inner;
                let mut offset = 0;
                for &p in parts {
                    let chunk = val(p).shape()[1] * inner;
                    if rg(p) {
                        let mut d = Vec::with_capacity(batch * chunk);
                        for bi in 0..batch {
                            d.extend_from_slice(&g.data()[bi * total + offset..][..chunk]);
                        }
                        accumulate(adj, p, Tensor::new(val(p).shape(), d)?);
                    }
                    offset += chunk;
                }
            }
            Op::Sum(x) => accumulate(adj, *x, Tensor::full(val(*x).shape(), g.item())),
            Op::Mean(x) => {
                let n = T::c(val(*x).len() as f64);
                accumulate(adj, *x, Tensor::full(val(*x).shape(), g.item() / n));
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let xv = val(*x);
                let shape = xv.shape();
                let (channels, group) = match shape[..] {
                    [_, c] => (c, c),
                    [_, c, h, w] => (c, h * w),
                    _ => unreachable!("validated in forward"),
                };
                let per_elem = shape.len() == 2;
                let gam = val(*gamma).data();
                let m = T::c(group as f64);
                let mut dx = Tensor::zeros(shape);
                let mut dgamma = Tensor::zeros(&[channels]);
                let mut dbeta = Tensor::zeros(&[channels]);
                for (gi, inv) in inv_std.iter().enumerate() {
                    let range = gi * group..(gi + 1) * group;
                    let gs = &g.data()[range.clone()];
                    let xh = &xhat[range.clone()];
                    let out = &mut dx.data_mut()[range];
                    let (mut sum_d, mut sum_dx) = (T::zero(), T::zero());
                    if per_elem {
                        for j in 0..group {
                            let dxh = gs[j] * gam[j];
                            sum_d += dxh;
                            sum_dx += dxh * xh[j];
                            dgamma.data_mut()[j] += gs[j] * xh[j];
                            dbeta.data_mut()[j] += gs[j];
                        }
                        for j in 0..group {
                            out[j] = *inv / m * (m * gs[j] * gam[j] - sum_d - xh[j] * sum_dx);
                        }
                    } else {
                        let c = gi % channels;
                        let ga = gam[c];
                        let (mut sg, mut sb) = (T::zero(), T::zero());
                        for (&gv, &x) in gs.iter().zip(xh) {
                            let dxh = gv * ga;
                            sum_d += dxh;
                            sum_dx += dxh * x;
                            sg += gv * x;
                            sb += gv;
                        }
                        dgamma.data_mut()[c] += sg;
                        dbeta.data_mut()[c] += sb;
                        for ((o, &gv), &x) in out.iter_mut().zip(gs).zip(xh) {
                            *o = *inv / m * (m * (gv * ga) - sum_d - x * sum_dx);
                        }
                    }
                }
                if rg(*x) {
                    accumulate(adj, *x, dx);
                }
                if rg(*gamma) {
                    accumulate(adj, *gamma, dgamma);
                }
                if rg(*beta) {
                    accumulate(adj, *beta, dbeta);
                }
            }
            Op::MaxPool2(x, arg) => {
                let mut d = Tensor::zeros(val(*x).shape());
                for (&a, &gv) in arg.iter().zip(g.data()) {
                    d.data_mut()[a] += gv;
                }
                accumulate(adj, *x, d);
            }
            Op::Upsample2(x) => {
                let xv = val(*x);
                let (_, _, _, w) = xv.dims4()?;
                let mut d = Tensor::zeros(xv.shape());
                for (dst, src) in d.data_mut().chunks_mut(w).zip(g.data().chunks(4 * w)) {
                    let (top, bot) = src.split_at(2 * w);
                    for (j, o) in dst.iter_mut().enumerate() {
                        *o = top[2 * j] + top[2 * j + 1] + bot[2 * j] + bot[2 * j + 1];
                    }
                }
                accumulate(adj, *x, d);
            }
            Op::Reshape(x) => {
                let shape = val(*x).shape().to_vec();
                accumulate(adj, *x, g.reshape(&shape)?);
            }
        }
        Ok(())
    }
}

fn binary_backward<T: Real>(
    kind: BinaryKind,
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut ga = Tensor::zeros(a.shape());
    let mut gb = Tensor::zeros(b.shape());
    let (ad, bd, gd) = (a.data(), b.data(), g.data());
    let mut step = |o: usize, ia: usize, ib: usize| {
        let (x, y, gv) = (ad[ia], bd[ib], gd[o]);
        let (da, db) = match kind {
            BinaryKind::Add => (gv, gv),
            BinaryKind::Sub => (gv, -gv),
            BinaryKind::Mul => (gv * y, gv * x),
            BinaryKind::Div => (gv / y, -gv * x / (y * y)),
        };
        ga.data_mut()[ia] += da;
        gb.data_mut()[ib] += db;
    };
    if a.shape() == b.shape() {
        for i in 0..gd.len() {
            step(i, i, i);
        }
    } else {
        Broadcast::new(a.shape(), b.shape())?.for_each(step);
    }
    Ok((ga, gb))
}
