use super::{axis_split, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Concat(Vec<Var>, usize),
    Slice {
        src: Var,
        axis: usize,
        start: usize,
    },
    Softmax(Var, usize),
    Silu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        axis: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Mean(Var, usize),
    Sum(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation tape. A node's parents always precede it, so the
/// tape is acyclic and a single reverse sweep computes all gradients.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    tracking: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Number of elements of `b` repeated along the leading axes of `a`:
/// same shape, scalar, or trailing-suffix broadcast.
fn broadcast_period(op: &'static str, a: &[usize], b: &[usize]) -> Result<usize> {
    let nb: usize = b.iter().product();
    if a == b || nb == 1 || (b.len() < a.len() && a[a.len() - b.len()..] == *b) {
        Ok(nb)
    } else {
        Err(Error::shape(op, a, b))
    }
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize, bool)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape("matmul", a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(Error::shape("matmul", a, b));
    }
    let batch: usize = a[..a.len() - 2].iter().product();
    let shared = b.len() == 2;
    if !shared && b[..b.len() - 2] != a[..a.len() - 2] {
        return Err(Error::shape("matmul", a, b));
    }
    Ok((batch, m, k, n, shared))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            tracking: true,
        }
    }

    /// Inference graph: nothing requires grad and no backward state is kept.
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            tracking: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = self.tracking && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf; gradients are reported for it.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: self.tracking,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        let period = broadcast_period(op, av.shape(), bv.shape())?;
        let bd = bv.data();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % period]))
            .collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    /// `a + b`, with `b` broadcast over the leading axes of `a` when it is a
    /// trailing suffix of `a`'s shape or a single element.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| c * x);
        self.push(out, Op::Scale(a, c), &[a])
    }

    /// `[..., m, k] × [k, n]` (shared right operand) or `[..., m, k] × [..., k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (batch, m, k, n, shared) = matmul_dims(av.shape(), bv.shape())?;
        let (ad, bd) = (av.data(), bv.data());
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let a_off = bi * m * k;
            let b_off = if shared { 0 } else { bi * k * n };
            let o_off = bi * m * n;
            for i in 0..m {
                let row = &mut out[o_off + i * n..o_off + (i + 1) * n];
                for p in 0..k {
                    let x = ad[a_off + i * k + p];
                    if x == 0.0 {
                        continue;
                    }
                    let brow = &bd[b_off + p * n..b_off + (p + 1) * n];
                    for (o, &y) in row.iter_mut().zip(brow) {
                        *o += x * y;
                    }
                }
            }
        }
        let mut shape = av.shape().to_vec();
        let last = shape.len() - 1;
        shape[last] = n;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of no tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid_shape(
                "concat",
                &base,
                format!("axis {axis}"),
            ));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let block = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Concat(parts.to_vec(), axis), parts))
    }

    fn slice(&mut self, src: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(src);
        let (outer, full, inner) = axis_split(v.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let off = (o * full + start) * inner;
            data.extend_from_slice(&v.data()[off..off + len * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Slice { src, axis, start }, &[src]))
    }

    /// Splits `x` into `parts` equal pieces along `axis`.
    pub fn chunk(&mut self, x: Var, parts: usize, axis: usize) -> Result<Vec<Var>> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || parts == 0 || !shape[axis].is_multiple_of(parts) {
            return Err(Error::invalid_shape(
                "chunk",
                &shape,
                format!("cannot split axis {axis} into {parts}"),
            ));
        }
        let len = shape[axis] / parts;
        (0..parts)
            .map(|i| self.slice(x, axis, i * len, len))
            .collect()
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        if axis >= v.rank() {
            return Err(Error::invalid_shape(
                "softmax",
                v.shape(),
                format!("axis {axis}"),
            ));
        }
        let (outer, len, inner) = axis_split(v.shape(), axis);
        let d = v.data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * len + i) * inner + j;
                let max = (0..len).map(|i| d[at(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for i in 0..len {
                    let e = (d[at(i)] - max).exp();
                    out[at(i)] = e;
                    sum += e;
                }
                for i in 0..len {
                    out[at(i)] /= sum;
                }
            }
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Softmax(x, axis), &[x]))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        self.push(out, Op::Silu(x), &[x])
    }

    /// Normalizes along `axis`, then applies per-feature `gain` and `bias`
    /// (both shaped `[shape[axis]]`).
    pub fn layernorm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        axis: usize,
        eps: f64,
    ) -> Result<Var> {
        let v = self.value(x);
        if axis >= v.rank() {
            return Err(Error::invalid_shape(
                "layernorm",
                v.shape(),
                format!("axis {axis}"),
            ));
        }
        let (outer, len, inner) = axis_split(v.shape(), axis);
        for p in [gain, bias] {
            if self.shape(p) != [len] {
                return Err(Error::shape("layernorm", &[len], self.shape(p)));
            }
        }
        let (d, g, b) = (v.data(), self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![0.0; d.len()];
        let mut inv_std = vec![0.0; outer * inner];
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * len + i) * inner + j;
                let mean = (0..len).map(|i| d[at(i)]).sum::<f64>() / len as f64;
                let var = (0..len).map(|i| (d[at(i)] - mean).powi(2)).sum::<f64>() / len as f64;
                let inv = 1.0 / (var + eps).sqrt();
                inv_std[o * inner + j] = inv;
                for i in 0..len {
                    let xh = (d[at(i)] - mean) * inv;
                    xhat[at(i)] = xh;
                    out[at(i)] = xh * g[i] + b[i];
                }
            }
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            axis,
            xhat,
            inv_std,
        };
        Ok(self.push(t, op, &[x, gain, bias]))
    }

    /// Mean along `axis`, removing it (a rank-1 input yields shape `[1]`).
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        if axis >= v.rank() {
            return Err(Error::invalid_shape(
                "mean",
                v.shape(),
                format!("axis {axis}"),
            ));
        }
        let (outer, len, inner) = axis_split(v.shape(), axis);
        let d = v.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..len {
                let row = &d[(o * len + i) * inner..(o * len + i + 1) * inner];
                for (acc, &x) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += x;
                }
            }
        }
        out.iter_mut().for_each(|x| *x /= len as f64);
        let mut shape: Vec<usize> = v.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Mean(x, axis), &[x]))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let t = self.value(x).permute(axes)?;
        Ok(self.push(t, Op::Permute(x, axes.to_vec()), &[x]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.value(x).rank();
        if r < 2 {
            return Err(Error::invalid_shape("transpose", self.shape(x), "rank < 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate additively
    /// over every use of a value.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad)
                    .map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
                let p = self.value(*b).numel();
                if let Some(gb) = self.slot(grads, *b) {
                    for (i, &y) in g.iter().enumerate() {
                        gb[i % p] += sign * y;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let p = bd.len();
                if let Some(ga) = self.slot(grads, *a) {
                    for (i, &y) in g.iter().enumerate() {
                        ga[i] += y * bd[i % p];
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for (i, &y) in g.iter().enumerate() {
                        gb[i % p] += y * ad[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += c * y);
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (batch, m, k, n, shared) =
                    matmul_dims(av.shape(), bv.shape()).expect("checked in forward");
                let (ad, bd) = (av.data(), bv.data());
                if let Some(ga) = self.slot(grads, *a) {
                    for bi in 0..batch {
                        let b_off = if shared { 0 } else { bi * k * n };
                        for i in 0..m {
                            let grow = &g[(bi * m + i) * n..(bi * m + i + 1) * n];
                            for p in 0..k {
                                let brow = &bd[b_off + p * n..b_off + (p + 1) * n];
                                ga[(bi * m + i) * k + p] +=
                                    grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for bi in 0..batch {
                        let b_off = if shared { 0 } else { bi * k * n };
                        for i in 0..m {
                            let grow = &g[(bi * m + i) * n..(bi * m + i + 1) * n];
                            for p in 0..k {
                                let x = ad[(bi * m + i) * k + p];
                                if x == 0.0 {
                                    continue;
                                }
                                let dst = &mut gb[b_off + p * n..b_off + (p + 1) * n];
                                dst.iter_mut().zip(grow).for_each(|(d, &y)| *d += x * y);
                            }
                        }
                    }
                }
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).shape()[*axis];
                    if let Some(gp) = self.slot(grads, p) {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            gp[dst..dst + len * inner]
                                .iter_mut()
                                .zip(&g[src..src + len * inner])
                                .for_each(|(x, &y)| *x += y);
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { src, axis, start } => {
                let full = self.value(*src).shape()[*axis];
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                if let Some(gs) = self.slot(grads, *src) {
                    for o in 0..outer {
                        let dst = (o * full + start) * inner;
                        gs[dst..dst + len * inner]
                            .iter_mut()
                            .zip(&g[o * len * inner..(o + 1) * len * inner])
                            .for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::Softmax(x, axis) => {
                let y = node.value.data();
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                if let Some(gx) = self.slot(grads, *x) {
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |i: usize| (o * len + i) * inner + j;
                            let dot: f64 = (0..len).map(|i| g[at(i)] * y[at(i)]).sum();
                            for i in 0..len {
                                gx[at(i)] += y[at(i)] * (g[at(i)] - dot);
                            }
                        }
                    }
                }
            }
            Op::Silu(x) => {
                let xd = self.value(*x).data();
                if let Some(gx) = self.slot(grads, *x) {
                    for (i, &y) in g.iter().enumerate() {
                        let s = sigmoid(xd[i]);
                        gx[i] += y * s * (1.0 + xd[i] * (1.0 - s));
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                axis,
                xhat,
                inv_std,
            } => {
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                let gd = self.value(*gain).data().to_vec();
                if let Some(gg) = self.slot(grads, *gain) {
                    for (i, (&y, &xh)) in g.iter().zip(xhat).enumerate() {
                        gg[(i / inner) % len] += y * xh;
                    }
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    for (i, &y) in g.iter().enumerate() {
                        gb[(i / inner) % len] += y;
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |i: usize| (o * len + i) * inner + j;
                            let dxh = |i: usize| g[at(i)] * gd[i];
                            let mean_d: f64 = (0..len).map(dxh).sum::<f64>() / len as f64;
                            let mean_dx: f64 =
                                (0..len).map(|i| dxh(i) * xhat[at(i)]).sum::<f64>() / len as f64;
                            let inv = inv_std[o * inner + j];
                            for i in 0..len {
                                gx[at(i)] += inv * (dxh(i) - mean_d - xhat[at(i)] * mean_dx);
                            }
                        }
                    }
                }
            }
            Op::Mean(x, axis) => {
                let (outer, len, inner) = axis_split(self.value(*x).shape(), *axis);
                if let Some(gx) = self.slot(grads, *x) {
                    for o in 0..outer {
                        for i in 0..len {
                            for j in 0..inner {
                                gx[(o * len + i) * inner + j] += g[o * inner + j] / len as f64;
                            }
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(v, &y)| *v += y);
                }
            }
            Op::Permute(x, axes) => {
                if let Some(gx) = self.slot(grads, *x) {
                    let mut inverse = vec![0; axes.len()];
                    for (k, &a) in axes.iter().enumerate() {
                        inverse[a] = k;
                    }
                    let gt = Tensor::new(node.value.shape().to_vec(), g.to_vec())
                        .and_then(|t| t.permute(&inverse))
                        .expect("permute inverse");
                    gx.iter_mut().zip(gt.data()).for_each(|(v, &y)| *v += y);
                }
            }
        }
    }
}
