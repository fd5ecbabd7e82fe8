//! Recorded-operation tape for reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value. `backward`
//! walks the nodes in reverse and accumulates vector-Jacobian products into
//! the parents that need a gradient. Nodes whose ancestors are all constants
//! (or frozen parameters) are skipped entirely.

use super::kernels::{self, ConvGeom, LinearTaps};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Abs,
    Square,
    Sqrt,
    Relu,
    Gelu,
    Softplus,
    Exp,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddConst(Var),
    MulConst(Var, f64),
    Unary(Var, Unary),
    Sum(Var),
    SumAxis { x: Var, axis: usize },
    Matmul(Var, Var),
    Softmax { x: Var, axis: usize },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Resize { x: Var, ty: LinearTaps, tx: LinearTaps },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Select { x: Var, axis: usize, indices: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    /// Records an input. Gradients are accumulated for it when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() == vb.shape() {
            let data = va
                .data()
                .iter()
                .zip(vb.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            return Tensor::new(va.shape(), data);
        }
        let out = kernels::broadcast_shape(va.shape(), vb.shape())?;
        let sa = kernels::broadcast_strides(va.shape(), &out);
        let sb = kernels::broadcast_strides(vb.shape(), &out);
        let numel: usize = out.iter().product();
        let mut data = vec![0.0; numel];
        let (da, db) = (va.data(), vb.data());
        kernels::for_each_broadcast(&out, &sa, &sb, |o, ia, ib| data[o] = f(da[ia], db[ib]));
        Tensor::new(&out, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x / y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Div(a, b), ng))
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|e| e + c);
        let ng = self.ng(x);
        self.push(v, Op::AddConst(x), ng)
    }

    pub fn mul_const(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|e| e * c);
        let ng = self.ng(x);
        self.push(v, Op::MulConst(x, c), ng)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.mul_const(x, -1.0)
    }

    fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Abs => f64::abs,
            Unary::Square => |e| e * e,
            Unary::Sqrt => f64::sqrt,
            Unary::Relu => |e| if e < 0.0 { 0.0 } else { e },
            Unary::Gelu => kernels::gelu,
            Unary::Softplus => kernels::softplus,
            Unary::Exp => f64::exp,
        };
        let v = self.value(x).map(f);
        let ng = self.ng(x);
        self.push(v, Op::Unary(x, kind), ng)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Abs)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sqrt)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Gelu)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(v, Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.mul_const(s, 1.0 / n)
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.ndim() {
            return Err(Error::shape(format!(
                "sum axis {axis} out of range for {:?}",
                xv.shape()
            )));
        }
        let (outer, len, inner) = kernels::split_axis(xv.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let d = xv.data();
        for o in 0..outer {
            for l in 0..len {
                let src = &d[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (acc, &e) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += e;
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = 1;
        let v = Tensor::new(&shape, out)?;
        let ng = self.ng(x);
        Ok(self.push(v, Op::SumAxis { x, axis }, ng))
    }

    /// Batched matrix product `[..., m, k] × [..., k, n]`.
    ///
    /// Batch extents must either match or collapse to a single matrix on one side.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let g = MatmulGeom::new(sa, sb)?;
        let mut out = vec![0.0; g.batch * g.m * g.n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for bi in 0..g.batch {
            let ao = if g.batch_a == 1 { 0 } else { bi * g.m * g.k };
            let bo = if g.batch_b == 1 { 0 } else { bi * g.k * g.n };
            kernels::gemm(
                g.m,
                g.k,
                g.n,
                &da[ao..ao + g.m * g.k],
                &db[bo..bo + g.k * g.n],
                &mut out[bi * g.m * g.n..(bi + 1) * g.m * g.n],
            );
        }
        let v = Tensor::new(&g.out_shape, out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Matmul(a, b), ng))
    }

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.ndim() {
            return Err(Error::shape(format!(
                "softmax axis {axis} out of range for {:?}",
                xv.shape()
            )));
        }
        let (outer, len, inner) = kernels::split_axis(xv.shape(), axis);
        let d = xv.data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for l in 0..len {
                    mx = mx.max(d[at(l)]);
                }
                let mut denom = 0.0;
                for l in 0..len {
                    let e = (d[at(l)] - mx).exp();
                    out[at(l)] = e;
                    denom += e;
                }
                for l in 0..len {
                    out[at(l)] /= denom;
                }
            }
        }
        let v = Tensor::new(xv.shape(), out)?;
        let ng = self.ng(x);
        Ok(self.push(v, Op::Softmax { x, axis }, ng))
    }

    /// Layer normalization along `axis` with population variance, then `gamma·x̂ + beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, axis: usize, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.ndim() {
            return Err(Error::shape(format!(
                "layernorm axis {axis} out of range for {:?}",
                xv.shape()
            )));
        }
        let (outer, len, inner) = kernels::split_axis(xv.shape(), axis);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.numel() != len || bv.numel() != len {
            return Err(Error::shape(format!(
                "layernorm affine params {:?}/{:?} do not match normalized extent {len}",
                gv.shape(),
                bv.shape()
            )));
        }
        let d = xv.data();
        let mut xhat = vec![0.0; d.len()];
        let mut rstd = vec![0.0; outer * inner];
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mean = (0..len).map(|l| d[at(l)]).sum::<f64>() / len as f64;
                let var = (0..len).map(|l| (d[at(l)] - mean).powi(2)).sum::<f64>() / len as f64;
                let r = 1.0 / (var + eps).sqrt();
                rstd[o * inner + i] = r;
                for l in 0..len {
                    let h = (d[at(l)] - mean) * r;
                    xhat[at(l)] = h;
                    out[at(l)] = h * gv.data()[l] + bv.data()[l];
                }
            }
        }
        let v = Tensor::new(xv.shape(), out)?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                axis,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Cross-correlation of `x[n,c,h,w]` with `w[o,c,kh,kw]`, optional bias `[o]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let [n, c, h, wd] = self.value(x).dims4("conv2d input")?;
        let [o, cw, kh, kw] = self.value(w).dims4("conv2d kernel")?;
        if cw != c {
            return Err(Error::shape(format!(
                "conv2d kernel {:?} expects {cw} channels, input {:?} has {c}",
                self.shape(w),
                self.shape(x)
            )));
        }
        if let Some(b) = b {
            if self.value(b).numel() != o {
                return Err(Error::shape(format!(
                    "conv2d bias {:?} does not match {o} output channels",
                    self.shape(b)
                )));
            }
        }
        let geom = ConvGeom::new(c, h, wd, kh, kw, stride, pad)?;
        let plane = geom.oh * geom.ow;
        let rows = geom.col_rows();
        let mut out = vec![0.0; n * o * plane];
        let mut cols = vec![0.0; rows * plane];
        let xd = self.value(x).data();
        let wdta = self.value(w).data();
        for ni in 0..n {
            let img = &xd[ni * c * h * wd..(ni + 1) * c * h * wd];
            let dst = &mut out[ni * o * plane..(ni + 1) * o * plane];
            if geom.is_pointwise() {
                kernels::gemm(o, rows, plane, wdta, img, dst);
            } else {
                kernels::im2col(&geom, img, &mut cols);
                kernels::gemm(o, rows, plane, wdta, &cols, dst);
            }
            if let Some(b) = b {
                let bd = self.value(b).data();
                for oi in 0..o {
                    for e in &mut dst[oi * plane..(oi + 1) * plane] {
                        *e += bd[oi];
                    }
                }
            }
        }
        let v = Tensor::new(&[n, o, geom.oh, geom.ow], out)?;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(v, Op::Conv2d { x, w, b, geom }, ng))
    }

    /// Bilinear resize of `x[n,c,h,w]` to `[n,c,out_h,out_w]`.
    ///
    /// Uses the half-pixel convention of [`LinearTaps`]. Resizing to the same
    /// extents returns an exact copy.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("resize input")?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::config("resize target must be at least 1x1"));
        }
        if (out_h, out_w) == (h, w) {
            let v = self.value(x).clone();
            let ng = self.ng(x);
            return Ok(self.push(v, Op::Reshape(x), ng));
        }
        let ty = LinearTaps::new(h, out_h);
        let tx = LinearTaps::new(w, out_w);
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * c * out_h * out_w];
        for p in 0..n * c {
            kernels::resize_plane(
                &xd[p * h * w..(p + 1) * h * w],
                w,
                &ty,
                &tx,
                &mut out[p * out_h * out_w..(p + 1) * out_h * out_w],
            );
        }
        let v = Tensor::new(&[n, c, out_h, out_w], out)?;
        let ng = self.ng(x);
        Ok(self.push(v, Op::Resize { x, ty, tx }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(v, Op::Reshape(x), ng))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let nd = xv.ndim();
        let mut seen = vec![false; nd];
        if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape(format!(
                "invalid permutation {perm:?} for {:?}",
                xv.shape()
            )));
        }
        let v = permute_tensor(xv, perm);
        let ng = self.ng(x);
        Ok(self.push(
            v,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            ng,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        let nd = self.value(x).ndim();
        if nd < 2 {
            return Err(Error::shape("transpose_last needs at least 2 axes"));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let base = self.value(first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::shape(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape(format!(
                    "concat along {axis}: {base:?} incompatible with {s:?}"
                )));
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let pv = self.value(p);
                let len = pv.shape()[axis];
                out.extend_from_slice(&pv.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let v = Tensor::new(&shape, out)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    /// Gathers `indices` along `axis` (indices may repeat).
    pub fn select(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.ndim() || indices.is_empty() {
            return Err(Error::shape(format!(
                "select along {axis} of {:?} with {} indices",
                xv.shape(),
                indices.len()
            )));
        }
        let (outer, len, inner) = kernels::split_axis(xv.shape(), axis);
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(Error::shape(format!(
                "select index {bad} out of range for extent {len}"
            )));
        }
        let d = xv.data();
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                out.extend_from_slice(&d[(o * len + i) * inner..(o * len + i + 1) * inner]);
            }
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = indices.len();
        let v = Tensor::new(&shape, out)?;
        let ng = self.ng(x);
        Ok(self.push(
            v,
            Op::Select {
                x,
                axis,
                indices: indices.to_vec(),
            },
            ng,
        ))
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got {:?}",
                lv.shape()
            )));
        }
        if !lv.all_finite() {
            return Err(Error::NonFinite(format!("loss value {}", lv.item())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Vec<f64>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, d) in g.data_mut().iter_mut().zip(delta) {
                    *a += d;
                }
            }
            slot @ None => {
                let shape = self.value(v).shape();
                *slot = Some(Tensor::new(shape, delta).expect("gradient shape"));
            }
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.ng(*a) {
                    let ga = kernels::reduce_to_shape(gd, out_shape, self.shape(*a));
                    self.accumulate(grads, *a, ga);
                }
                if self.ng(*b) {
                    let mut gb = kernels::reduce_to_shape(gd, out_shape, self.shape(*b));
                    if sign < 0.0 {
                        gb.iter_mut().for_each(|e| *e = -*e);
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let is_div = matches!(node.op, Op::Div(..));
                let (va, vb) = (self.value(*a), self.value(*b));
                let sa = kernels::broadcast_strides(va.shape(), out_shape);
                let sb = kernels::broadcast_strides(vb.shape(), out_shape);
                let (da, db) = (va.data(), vb.data());
                if self.ng(*a) {
                    let mut full = vec![0.0; gd.len()];
                    kernels::for_each_broadcast(out_shape, &sa, &sb, |o, _, ib| {
                        full[o] = if is_div { gd[o] / db[ib] } else { gd[o] * db[ib] };
                    });
                    let ga = kernels::reduce_to_shape(&full, out_shape, va.shape());
                    self.accumulate(grads, *a, ga);
                }
                if self.ng(*b) {
                    let mut full = vec![0.0; gd.len()];
                    kernels::for_each_broadcast(out_shape, &sa, &sb, |o, ia, ib| {
                        full[o] = if is_div {
                            -gd[o] * da[ia] / (db[ib] * db[ib])
                        } else {
                            gd[o] * da[ia]
                        };
                    });
                    let gb = kernels::reduce_to_shape(&full, out_shape, vb.shape());
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::AddConst(x) => self.accumulate(grads, *x, gd.to_vec()),
            Op::MulConst(x, c) => self.accumulate(grads, *x, gd.iter().map(|e| e * c).collect()),
            Op::Unary(x, kind) => {
                let xd = self.value(*x).data();
                let yd = node.value.data();
                let delta = gd
                    .iter()
                    .zip(xd)
                    .zip(yd)
                    .map(|((&g, &x), &y)| {
                        g * match kind {
                            Unary::Abs => {
                                if x > 0.0 {
                                    1.0
                                } else if x < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Square => 2.0 * x,
                            Unary::Sqrt => 0.5 / y,
                            Unary::Relu => {
                                if x > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Gelu => kernels::gelu_grad(x),
                            Unary::Softplus => kernels::sigmoid(x),
                            Unary::Exp => y,
                        }
                    })
                    .collect();
                self.accumulate(grads, *x, delta);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![gd[0]; n]);
            }
            Op::SumAxis { x, axis } => {
                let xs = self.shape(*x);
                let (outer, len, inner) = kernels::split_axis(xs, *axis);
                let mut delta = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        delta[(o * len + l) * inner..(o * len + l + 1) * inner]
                            .copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                    }
                }
                self.accumulate(grads, *x, delta);
            }
            Op::Matmul(a, b) => {
                let g_ = MatmulGeom::new(self.shape(*a), self.shape(*b))?;
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                let (m, k, n) = (g_.m, g_.k, g_.n);
                if self.ng(*a) {
                    let mut ga = vec![0.0; da.len()];
                    for bi in 0..g_.batch {
                        let ao = if g_.batch_a == 1 { 0 } else { bi * m * k };
                        let bo = if g_.batch_b == 1 { 0 } else { bi * k * n };
                        kernels::gemm_nt(
                            m,
                            n,
                            k,
                            &gd[bi * m * n..(bi + 1) * m * n],
                            &db[bo..bo + k * n],
                            &mut ga[ao..ao + m * k],
                        );
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.ng(*b) {
                    let mut gb = vec![0.0; db.len()];
                    for bi in 0..g_.batch {
                        let ao = if g_.batch_a == 1 { 0 } else { bi * m * k };
                        let bo = if g_.batch_b == 1 { 0 } else { bi * k * n };
                        kernels::gemm_tn(
                            m,
                            k,
                            n,
                            &da[ao..ao + m * k],
                            &gd[bi * m * n..(bi + 1) * m * n],
                            &mut gb[bo..bo + k * n],
                        );
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = kernels::split_axis(out_shape, *axis);
                let y = node.value.data();
                let mut delta = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let dot: f64 = (0..len).map(|l| gd[at(l)] * y[at(l)]).sum();
                        for l in 0..len {
                            delta[at(l)] = y[at(l)] * (gd[at(l)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, delta);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                axis,
                xhat,
                rstd,
            } => {
                let (outer, len, inner) = kernels::split_axis(out_shape, *axis);
                let gam = self.value(*gamma).data();
                if self.ng(*x) {
                    let mut delta = vec![0.0; gd.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + i;
                            let mut m1 = 0.0;
                            let mut m2 = 0.0;
                            for l in 0..len {
                                let gh = gd[at(l)] * gam[l];
                                m1 += gh;
                                m2 += gh * xhat[at(l)];
                            }
                            m1 /= len as f64;
                            m2 /= len as f64;
                            let r = rstd[o * inner + i];
                            for l in 0..len {
                                let gh = gd[at(l)] * gam[l];
                                delta[at(l)] = r * (gh - m1 - xhat[at(l)] * m2);
                            }
                        }
                    }
                    self.accumulate(grads, *x, delta);
                }
                if self.ng(*gamma) || self.ng(*beta) {
                    let mut dg = vec![0.0; len];
                    let mut db = vec![0.0; len];
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner {
                                let at = (o * len + l) * inner + i;
                                dg[l] += gd[at] * xhat[at];
                                db[l] += gd[at];
                            }
                        }
                    }
                    self.accumulate(grads, *gamma, dg);
                    self.accumulate(grads, *beta, db);
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let [n, o, _, _] = node.value.dims4("conv2d output")?;
                let plane = geom.oh * geom.ow;
                let rows = geom.col_rows();
                let img_len = geom.c * geom.h * geom.w;
                let xd = self.value(*x).data();
                let wd = self.value(*w).data();
                let mut gx = if self.ng(*x) { vec![0.0; xd.len()] } else { Vec::new() };
                let mut gw = if self.ng(*w) { vec![0.0; wd.len()] } else { Vec::new() };
                let mut cols = vec![0.0; rows * plane];
                let mut dcols = vec![0.0; rows * plane];
                for ni in 0..n {
                    let gout = &gd[ni * o * plane..(ni + 1) * o * plane];
                    let img = &xd[ni * img_len..(ni + 1) * img_len];
                    if self.ng(*w) {
                        if geom.is_pointwise() {
                            kernels::gemm_nt(o, plane, rows, gout, img, &mut gw);
                        } else {
                            kernels::im2col(geom, img, &mut cols);
                            kernels::gemm_nt(o, plane, rows, gout, &cols, &mut gw);
                        }
                    }
                    if self.ng(*x) {
                        let gimg = &mut gx[ni * img_len..(ni + 1) * img_len];
                        if geom.is_pointwise() {
                            kernels::gemm_tn(o, rows, plane, wd, gout, gimg);
                        } else {
                            dcols.iter_mut().for_each(|e| *e = 0.0);
                            kernels::gemm_tn(o, rows, plane, wd, gout, &mut dcols);
                            kernels::col2im(geom, &dcols, gimg);
                        }
                    }
                }
                if self.ng(*x) {
                    self.accumulate(grads, *x, gx);
                }
                if self.ng(*w) {
                    self.accumulate(grads, *w, gw);
                }
                if let Some(b) = b {
                    if self.ng(*b) {
                        let mut gb = vec![0.0; o];
                        for ni in 0..n {
                            for (oi, acc) in gb.iter_mut().enumerate() {
                                let s = (ni * o + oi) * plane;
                                *acc += gd[s..s + plane].iter().sum::<f64>();
                            }
                        }
                        self.accumulate(grads, *b, gb);
                    }
                }
            }
            Op::Resize { x, ty, tx } => {
                let [n, c, h, w] = self.value(*x).dims4("resize input")?;
                let (oh, ow) = (ty.lo.len(), tx.lo.len());
                let mut delta = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    kernels::resize_plane_backward(
                        &gd[p * oh * ow..(p + 1) * oh * ow],
                        w,
                        ty,
                        tx,
                        &mut delta[p * h * w..(p + 1) * h * w],
                    );
                }
                self.accumulate(grads, *x, delta);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, gd.to_vec()),
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let back = permute_tensor(g, &inv);
                self.accumulate(grads, *x, back.into_data());
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = kernels::split_axis(out_shape, *axis);
                let mut start = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.ng(p) {
                        let mut delta = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let s = (o * total + start) * inner;
                            delta.extend_from_slice(&gd[s..s + len * inner]);
                        }
                        self.accumulate(grads, p, delta);
                    }
                    start += len;
                }
            }
            Op::Select { x, axis, indices } => {
                let xs = self.shape(*x);
                let (outer, len, inner) = kernels::split_axis(xs, *axis);
                let k = indices.len();
                let mut delta = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for (j, &i) in indices.iter().enumerate() {
                        let src = &gd[(o * k + j) * inner..(o * k + j + 1) * inner];
                        let dst = &mut delta[(o * len + i) * inner..(o * len + i + 1) * inner];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                self.accumulate(grads, *x, delta);
            }
        }
        Ok(())
    }
}

struct MatmulGeom {
    batch: usize,
    batch_a: usize,
    batch_b: usize,
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
}

impl MatmulGeom {
    fn new(sa: &[usize], sb: &[usize]) -> Result<Self> {
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape(format!(
                "matmul needs at least 2-D operands, got {sa:?} and {sb:?}"
            )));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner extents differ: {sa:?} x {sb:?}"
            )));
        }
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let batch_a: usize = ba.iter().product();
        let batch_b: usize = bb.iter().product();
        let batch_dims = if batch_a >= batch_b { ba } else { bb };
        let batch = batch_a.max(batch_b);
        let compatible = if batch_a == 1 || batch_b == 1 {
            true
        } else {
            ba == bb
        };
        if !compatible {
            return Err(Error::shape(format!(
                "matmul batch extents not broadcastable: {sa:?} x {sb:?}"
            )));
        }
        let mut out_shape = batch_dims.to_vec();
        out_shape.extend([m, n]);
        Ok(MatmulGeom {
            batch,
            batch_a,
            batch_b,
            m,
            k,
            n,
            out_shape,
        })
    }
}

fn permute_tensor(t: &Tensor, perm: &[usize]) -> Tensor {
    let shape = t.shape();
    let in_strides = kernels::strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let zeros = vec![0; out_shape.len()];
    let d = t.data();
    let mut out = vec![0.0; d.len()];
    kernels::for_each_broadcast(&out_shape, &src_strides, &zeros, |o, s, _| out[o] = d[s]);
    Tensor::new(&out_shape, out).expect("permute preserves element count")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::new();
        let i2 = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let a = tape.constant(t(&[2, 2], &[3.0, -1.0, 2.5, 7.0]));
        let r = tape.matmul(i2, a).unwrap();
        assert_eq!(tape.value(r), tape.value(a));

        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let ones = tape.constant(t(&[2, 1], &[1.0, 1.0]));
        let r = tape.matmul(a, ones).unwrap();
        assert_eq!(tape.value(r).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] x [2, 3]"), "{err}");
    }

    #[test]
    fn softmax_closed_forms() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(t(&[2], &[1000.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0]);
        let x = tape.constant(t(&[3], &[1f64.ln(), 2f64.ln(), 3f64.ln()]));
        let y = tape.softmax(x, 0).unwrap();
        let want = [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0];
        for (v, w) in tape.value(y).data().iter().zip(want) {
            assert!((v - w).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_over_middle_axis() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 2], |i| (i[0] + 2 * i[1] + i[2]) as f64 * 0.3));
        let y = tape.softmax(x, 1).unwrap();
        let v = tape.value(y);
        for a in 0..2 {
            for c in 0..2 {
                let s: f64 = (0..3).map(|b| v.get(&[a, b, c])).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_identity_and_averaging() {
        let mut tape = Tape::new();
        let img = Tensor::from_fn(&[1, 1, 4, 5], |i| (i[2] * 5 + i[3]) as f64);
        let x = tape.constant(img.clone());
        let k = tape.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
        let y = tape.conv2d(x, k, None, 1, 0).unwrap();
        assert_eq!(tape.value(y), &img);

        let c = tape.constant(Tensor::full(&[1, 1, 6, 6], 2.5));
        let avg = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0));
        let y = tape.conv2d(c, avg, None, 1, 1).unwrap();
        let v = tape.value(y);
        assert_eq!(v.shape(), &[1, 1, 6, 6]);
        for r in 1..5 {
            for col in 1..5 {
                assert!((v.get(&[0, 0, r, col]) - 2.5).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn conv_output_extent_formula_and_zero_extent_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 7, 9]));
        let k = tape.constant(Tensor::zeros(&[3, 2, 3, 3]));
        let y = tape.conv2d(x, k, None, 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 3, (7 + 2 - 3) / 2 + 1, (9 + 2 - 3) / 2 + 1]);
        let small = tape.constant(Tensor::zeros(&[1, 2, 3, 3]));
        let big = tape.constant(Tensor::zeros(&[1, 2, 5, 5]));
        assert!(matches!(
            tape.conv2d(small, big, None, 1, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn resize_same_size_is_exact_copy() {
        let mut tape = Tape::new();
        let img = Tensor::from_fn(&[1, 2, 3, 3], |i| (i[1] * 9 + i[2] * 3 + i[3]) as f64 * 0.1 - 0.4);
        let x = tape.constant(img.clone());
        let y = tape.resize_bilinear(x, 3, 3).unwrap();
        assert_eq!(tape.value(y), &img);
        let c = tape.constant(Tensor::full(&[1, 1, 3, 5], -1.75));
        for (h, w) in [(1, 1), (7, 2), (12, 20)] {
            let y = tape.resize_bilinear(c, h, w).unwrap();
            assert!(tape.value(y).data().iter().all(|&v| v == -1.75));
        }
    }

    #[test]
    fn resize_matches_scalar_interpolation() {
        // Independent scalar routine: clamp the half-pixel sample point and blend.
        fn sample(img: &[[f64; 2]; 2], y: f64, x: f64) -> f64 {
            let y = y.clamp(0.0, 1.0);
            let x = x.clamp(0.0, 1.0);
            let (y0, x0) = (y.floor() as usize, x.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(1), (x0 + 1).min(1));
            let (fy, fx) = (y - y0 as f64, x - x0 as f64);
            let top = img[y0][x0] + (img[y0][x1] - img[y0][x0]) * fx;
            let bot = img[y1][x0] + (img[y1][x1] - img[y1][x0]) * fx;
            top + (bot - top) * fy
        }
        let src = [[0.0, 1.0], [2.0, 3.0]];
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[0.0, 1.0, 2.0, 3.0]));
        let y = tape.resize_bilinear(x, 4, 4).unwrap();
        let v = tape.value(y);
        for r in 0..4 {
            for c in 0..4 {
                let sy = (r as f64 + 0.5) * 0.5 - 0.5;
                let sx = (c as f64 + 0.5) * 0.5 - 0.5;
                assert!((v.get(&[0, 0, r, c]) - sample(&src, sy, sx)).abs() < 1e-14);
            }
        }
        // corner values are clamped copies; interior blends
        assert_eq!(v.get(&[0, 0, 0, 0]), 0.0);
        assert_eq!(v.get(&[0, 0, 3, 3]), 3.0);
        assert!((v.get(&[0, 0, 1, 1]) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn layernorm_closed_forms() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(t(&[1, 2], &[1.0, 3.0]));
        let y = tape.layernorm(x, g, b, 1, 1e-5).unwrap();
        let d = tape.value(y).data();
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((d[0] + expect).abs() < 1e-15 && (d[1] - expect).abs() < 1e-15);
        assert!((d[1] - 1.0).abs() < 1e-5);

        let g4 = tape.constant(Tensor::full(&[4], 1.0));
        let b4 = tape.constant(Tensor::zeros(&[4]));
        let c = tape.constant(Tensor::full(&[3, 4], 7.0));
        let y = tape.layernorm(c, g4, b4, 1, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        assert!(tape.layernorm(c, g, b, 1, 1e-5).is_err());
    }

    #[test]
    fn permute_and_concat_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 4], |i| (i[0] * 100 + i[1] * 10 + i[2]) as f64));
        let p = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(p), &[4, 2, 3]);
        assert_eq!(tape.value(p).get(&[3, 1, 2]), 123.0);
        assert!(tape.permute(x, &[0, 0, 1]).is_err());
        let c = tape.concat(&[x, x], 1).unwrap();
        assert_eq!(tape.shape(c), &[2, 6, 4]);
        assert_eq!(tape.value(c).get(&[1, 4, 3]), 113.0);
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let b = tape.leaf(t(&[2], &[3.0, 4.0]), false);
        let p = tape.mul(a, b).unwrap();
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[3.0, 4.0]);
        assert!(g.get(b).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(tape.backward(a).is_err());
    }
}
