//! Reverse-mode differentiation over a recorded operation list.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s together with
//! the computed value. [`Tape::backward`] replays the backward rules in
//! reverse recording order, starting from a scalar loss, and returns a
//! [`Gradients`] table. Leaves bound from a [`ParamStore`] remember their
//! [`ParamId`] so the gradients can be folded back into the store.
//!
//! Values of bound parameters are borrowed, not copied, which is why the tape
//! carries a lifetime.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Tree depth above which leaf probabilities are accumulated in log space.
pub const LOG_SPACE_DEPTH: usize = 8;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        kernels: Var,
        bias: Var,
        stride: usize,
        geom: ConvGeom,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    Concat(Vec<Var>),
    ScaleAdd {
        a: Var,
        b: Var,
        alpha: f64,
        beta: f64,
    },
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Reshape(Var),
    Transpose(Var),
    TreeLeaves {
        logits: Var,
        depth: usize,
    },
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

#[derive(Debug)]
struct Node<'a> {
    dims: Vec<usize>,
    value: Cow<'a, [f64]>,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    store: Option<&'a ParamStore>,
    bound: Vec<Option<Var>>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            store: None,
            bound: Vec::new(),
        }
    }

    /// A tape whose [`Tape::p`] lookups resolve against `store`.
    pub fn with_params(store: &'a ParamStore) -> Self {
        Self {
            nodes: Vec::new(),
            store: Some(store),
            bound: vec![None; store.len()],
        }
    }

    /// The leaf for parameter `id` of the attached store, bound on first use.
    pub fn p(&mut self, id: ParamId) -> Result<Var> {
        let store = self
            .store
            .ok_or_else(|| Error::invalid("tape has no parameter store attached"))?;
        if id.index() >= store.len() {
            return Err(Error::invalid(format!(
                "parameter id {} out of range for store of {}",
                id.index(),
                store.len()
            )));
        }
        if let Some(v) = self.bound[id.index()] {
            return Ok(v);
        }
        let v = self.param(store, id);
        self.bound[id.index()] = Some(v);
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].dims
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Copies a recorded value out as a standalone tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.dims.clone(), n.value.to_vec()).expect("recorded node is well-formed")
    }

    fn push(&mut self, dims: Vec<usize>, value: Cow<'a, [f64]>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(dims.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            dims,
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a tensor that is not differentiated.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let dims = t.dims().to_vec();
        self.push(dims, Cow::Owned(t.into_data()), Op::Leaf, false)
    }

    pub fn constant_vec(&mut self, data: Vec<f64>) -> Var {
        let n = data.len();
        self.push(vec![n], Cow::Owned(data), Op::Leaf, false)
    }

    /// Borrows a tensor as a leaf; it is differentiated when the tensor
    /// requires grad.
    pub fn leaf(&mut self, t: &'a Tensor) -> Var {
        self.push(
            t.dims().to_vec(),
            Cow::Borrowed(t.data()),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    /// Borrows a stored parameter as a differentiated leaf.
    pub fn param(&mut self, store: &'a ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        let v = self.push(
            t.dims().to_vec(),
            Cow::Borrowed(t.data()),
            Op::Leaf,
            true,
        );
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da.len() != 2 || db.len() != 2 || da[1] != db[0] {
            return Err(Error::DimensionMismatch {
                op: "matmul",
                left: da.to_vec(),
                right: db.to_vec(),
            });
        }
        let (m, k, n) = (da[0], da[1], db[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], Cow::Owned(out), Op::MatMul(a, b), rg))
    }

    /// Strided valid cross-correlation.
    ///
    /// `input` is `[C_in, H, W]` or batched `[N, C_in, H, W]`; `kernels` is
    /// `[C_out, C_in, kH, kW]` and `bias` is `[C_out]`. The output keeps the
    /// batch axis of the input.
    pub fn conv2d(&mut self, input: Var, kernels: Var, bias: Var, stride: usize) -> Result<Var> {
        let di = self.dims(input).to_vec();
        let dk = self.dims(kernels).to_vec();
        let db = self.dims(bias).to_vec();
        let mismatch = |l: &[usize], r: &[usize]| Error::DimensionMismatch {
            op: "conv2d",
            left: l.to_vec(),
            right: r.to_vec(),
        };
        let (batch, c_in, h, w) = match di.as_slice() {
            [c, h, w] => (1, *c, *h, *w),
            [n, c, h, w] => (*n, *c, *h, *w),
            _ => return Err(mismatch(&di, &dk)),
        };
        if stride == 0 {
            return Err(Error::invalid("conv2d: stride must be positive"));
        }
        let [c_out, kc, kh, kw] = dk.as_slice() else {
            return Err(mismatch(&di, &dk));
        };
        let (c_out, kh, kw) = (*c_out, *kh, *kw);
        if *kc != c_in {
            return Err(mismatch(&di, &dk));
        }
        if kh > h || kw > w {
            return Err(Error::invalid(format!(
                "conv2d: kernel {kh}x{kw} larger than input {h}x{w}"
            )));
        }
        if db != [c_out] {
            return Err(mismatch(&dk, &db));
        }
        let oh = (h - kh) / stride + 1;
        let ow = (w - kw) / stride + 1;
        let geom = ConvGeom {
            batch,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            oh,
            ow,
        };
        let x = self.value(input);
        let k = self.value(kernels);
        let b = self.value(bias);
        let kdim = c_in * kh * kw;
        let hw = oh * ow;
        let mut out = vec![0.0; batch * c_out * hw];
        let mut col = vec![0.0; kdim * hw];
        for n in 0..batch {
            let xin = &x[n * c_in * h * w..(n + 1) * c_in * h * w];
            im2col(xin, &geom, stride, &mut col);
            let o = &mut out[n * c_out * hw..(n + 1) * c_out * hw];
            for (co, row) in o.chunks_mut(hw).enumerate() {
                row.iter_mut().for_each(|v| *v = b[co]);
            }
            gemm_nn(k, &col, o, c_out, kdim, hw);
        }
        let dims = if di.len() == 3 {
            vec![c_out, oh, ow]
        } else {
            vec![batch, c_out, oh, ow]
        };
        let rg = self.rg(input) || self.rg(kernels) || self.rg(bias);
        Ok(self.push(
            dims,
            Cow::Owned(out),
            Op::Conv2d {
                input,
                kernels,
                bias,
                stride,
                geom,
            },
            rg,
        ))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|&v| f(v)).collect();
        let dims = self.dims(x).to_vec();
        let rg = self.rg(x);
        self.push(dims, Cow::Owned(out), op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    /// Softmax over all entries of `x`, which must be a vector.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let d = self.dims(x);
        if d.len() != 1 && !(d.len() == 2 && (d[0] == 1 || d[1] == 1)) {
            return Err(Error::invalid(format!(
                "softmax: expected a vector, got dims {d:?}"
            )));
        }
        let out = softmax(self.value(x));
        let dims = d.to_vec();
        let rg = self.rg(x);
        Ok(self.push(dims, Cow::Owned(out), Op::Softmax(x), rg))
    }

    /// Concatenation along the first axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::invalid("concat: empty input list"))?;
        let tail = self.dims(first)[1..].to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        let mut rg = false;
        for &x in xs {
            let d = self.dims(x);
            if d[1..] != tail[..] {
                return Err(Error::DimensionMismatch {
                    op: "concat",
                    left: self.dims(first).to_vec(),
                    right: d.to_vec(),
                });
            }
            lead += d[0];
            out.extend_from_slice(self.value(x));
            rg |= self.rg(x);
        }
        let mut dims = vec![lead];
        dims.extend(tail);
        Ok(self.push(dims, Cow::Owned(out), Op::Concat(xs.to_vec()), rg))
    }

    /// `alpha * a + beta * b` for equally shaped operands.
    pub fn scale_add(&mut self, a: Var, b: Var, alpha: f64, beta: f64) -> Result<Var> {
        self.same_dims("scale_add", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| alpha * x + beta * y)
            .collect();
        let dims = self.dims(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            dims,
            Cow::Owned(out),
            Op::ScaleAdd { a, b, alpha, beta },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.scale_add(a, b, 1.0, 1.0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.scale_add(a, b, 1.0, -1.0)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims("mul", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let dims = self.dims(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(dims, Cow::Owned(out), Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, alpha: f64) -> Var {
        self.unary(x, |v| alpha * v, Op::Scale(x, alpha))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(vec![1], Cow::Owned(vec![s]), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, x: Var, dims: Vec<usize>) -> Result<Var> {
        let n: usize = dims.iter().product();
        if n != self.value(x).len() || dims.contains(&0) {
            return Err(Error::DimensionMismatch {
                op: "reshape",
                left: self.dims(x).to_vec(),
                right: dims,
            });
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(dims, Cow::Owned(out), Op::Reshape(x), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let d = self.dims(x).to_vec();
        let [r, c] = d.as_slice() else {
            return Err(Error::invalid(format!(
                "transpose: expected a matrix, got dims {d:?}"
            )));
        };
        let (r, c) = (*r, *c);
        let v = self.value(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![c, r], Cow::Owned(out), Op::Transpose(x), rg))
    }

    /// Leaf probabilities of a complete binary tree of soft routing neurons.
    ///
    /// `logits` holds the pre-activation of the 2^depth − 1 split nodes in
    /// heap order; node `n` sends mass σ(logits[n]) to its left child `2n+1`
    /// and the remainder to `2n+2`. The output lists the 2^depth leaves
    /// left to right.
    pub fn tree_leaves(&mut self, logits: Var, depth: usize) -> Result<Var> {
        if depth == 0 || depth > 24 {
            return Err(Error::invalid(format!(
                "tree depth must be in 1..=24, got {depth}"
            )));
        }
        let nodes = (1usize << depth) - 1;
        if self.value(logits).len() != nodes {
            return Err(Error::DimensionMismatch {
                op: "tree_leaves",
                left: self.dims(logits).to_vec(),
                right: vec![nodes],
            });
        }
        let leaves = tree_leaf_probs(self.value(logits), depth);
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1 << depth],
            Cow::Owned(leaves),
            Op::TreeLeaves { logits, depth },
            rg,
        ))
    }

    fn same_dims(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::DimensionMismatch {
                op,
                left: self.dims(a).to_vec(),
                right: self.dims(b).to_vec(),
            });
        }
        Ok(())
    }

    /// Propagates d(loss)/d(node) from a single-element `loss` back to every
    /// differentiated node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward: loss must be a scalar, got dims {:?}",
                self.dims(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .take(loss.0 + 1)
            .filter_map(|(i, n)| n.param.map(|p| (p, Var(i))))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn backward_node(&self, node: &Node<'a>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let value = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.dims(*a)[0], self.dims(*a)[1]);
                let n = self.dims(*b)[1];
                if self.rg(*a) {
                    let ga = slot(grads, *a, m * k);
                    gemm_nt(g, self.value(*b), ga, m, n, k);
                }
                if self.rg(*b) {
                    let gb = slot(grads, *b, k * n);
                    gemm_tn(self.value(*a), g, gb, k, m, n);
                }
            }
            Op::Conv2d {
                input,
                kernels,
                bias,
                stride,
                geom,
            } => self.conv2d_backward(*input, *kernels, *bias, *stride, geom, g, grads),
            Op::Relu(x) => {
                let xv = self.value(*x);
                let gx = slot(grads, *x, xv.len());
                for ((o, &xi), &gi) in gx.iter_mut().zip(xv).zip(g) {
                    if xi > 0.0 {
                        *o += gi;
                    }
                }
            }
            Op::Sigmoid(x) => {
                let gx = slot(grads, *x, g.len());
                for ((o, &y), &gi) in gx.iter_mut().zip(value.iter()).zip(g) {
                    *o += gi * y * (1.0 - y);
                }
            }
            Op::Tanh(x) => {
                let gx = slot(grads, *x, g.len());
                for ((o, &y), &gi) in gx.iter_mut().zip(value.iter()).zip(g) {
                    *o += gi * (1.0 - y * y);
                }
            }
            Op::Softmax(x) => {
                let s: f64 = g.iter().zip(value.iter()).map(|(gi, yi)| gi * yi).sum();
                let gx = slot(grads, *x, g.len());
                for ((o, &y), &gi) in gx.iter_mut().zip(value.iter()).zip(g) {
                    *o += y * (gi - s);
                }
            }
            Op::Concat(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = self.value(x).len();
                    if self.rg(x) {
                        let gx = slot(grads, x, n);
                        for (o, &gi) in gx.iter_mut().zip(&g[off..off + n]) {
                            *o += gi;
                        }
                    }
                    off += n;
                }
            }
            Op::ScaleAdd { a, b, alpha, beta } => {
                for (x, c) in [(*a, *alpha), (*b, *beta)] {
                    if self.rg(x) {
                        let gx = slot(grads, x, g.len());
                        for (o, &gi) in gx.iter_mut().zip(g) {
                            *o += c * gi;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                for (x, other) in [(*a, *b), (*b, *a)] {
                    if self.rg(x) {
                        let ov = self.value(other);
                        let gx = slot(grads, x, g.len());
                        for ((o, &gi), &w) in gx.iter_mut().zip(g).zip(ov) {
                            *o += gi * w;
                        }
                    }
                }
            }
            Op::Scale(x, alpha) => {
                let gx = slot(grads, *x, g.len());
                for (o, &gi) in gx.iter_mut().zip(g) {
                    *o += alpha * gi;
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                let gx = slot(grads, *x, n);
                for o in gx.iter_mut() {
                    *o += g[0];
                }
            }
            Op::Reshape(x) => {
                let gx = slot(grads, *x, g.len());
                for (o, &gi) in gx.iter_mut().zip(g) {
                    *o += gi;
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (self.dims(*x)[0], self.dims(*x)[1]);
                let gx = slot(grads, *x, r * c);
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::TreeLeaves { logits, depth } => {
                let gz = tree_leaves_backward(self.value(*logits), *depth, g);
                let gx = slot(grads, *logits, gz.len());
                for (o, v) in gx.iter_mut().zip(gz) {
                    *o += v;
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        input: Var,
        kernels: Var,
        bias: Var,
        stride: usize,
        geom: &ConvGeom,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let ConvGeom {
            batch,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            oh,
            ow,
        } = *geom;
        let hw = oh * ow;
        let kdim = c_in * kh * kw;
        let x = self.value(input);
        let k = self.value(kernels);

        if self.rg(bias) {
            let gb = slot(grads, bias, c_out);
            for n in 0..batch {
                for (co, b) in gb.iter_mut().enumerate() {
                    let off = (n * c_out + co) * hw;
                    *b += g[off..off + hw].iter().sum::<f64>();
                }
            }
        }
        let need_k = self.rg(kernels);
        let need_x = self.rg(input);
        if !need_k && !need_x {
            return;
        }
        let mut col = vec![0.0; kdim * hw];
        let mut gk = vec![0.0; c_out * kdim];
        let mut gcol = vec![0.0; kdim * hw];
        let mut gx = if need_x {
            vec![0.0; batch * c_in * h * w]
        } else {
            Vec::new()
        };
        for n in 0..batch {
            let gn = &g[n * c_out * hw..(n + 1) * c_out * hw];
            if need_k {
                let xin = &x[n * c_in * h * w..(n + 1) * c_in * h * w];
                im2col(xin, geom, stride, &mut col);
                gemm_nt(gn, &col, &mut gk, c_out, hw, kdim);
            }
            if need_x {
                gcol.iter_mut().for_each(|v| *v = 0.0);
                gemm_tn(k, gn, &mut gcol, kdim, c_out, hw);
                let gxn = &mut gx[n * c_in * h * w..(n + 1) * c_in * h * w];
                col2im_add(&gcol, geom, stride, gxn);
            }
        }
        if need_k {
            let s = slot(grads, kernels, gk.len());
            for (o, v) in s.iter_mut().zip(gk) {
                *o += v;
            }
        }
        if need_x {
            let s = slot(grads, input, gx.len());
            for (o, v) in s.iter_mut().zip(gx) {
                *o += v;
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn im2col(x: &[f64], geom: &ConvGeom, stride: usize, col: &mut [f64]) {
    let ConvGeom {
        c_in,
        h,
        w,
        kh,
        kw,
        oh,
        ow,
        ..
    } = *geom;
    let hw = oh * ow;
    for ci in 0..c_in {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                for oy in 0..oh {
                    let src = ci * h * w + (oy * stride + ky) * w + kx;
                    for ox in 0..ow {
                        dst[oy * ow + ox] = x[src + ox * stride];
                    }
                }
            }
        }
    }
}

fn col2im_add(col: &[f64], geom: &ConvGeom, stride: usize, x: &mut [f64]) {
    let ConvGeom {
        c_in,
        h,
        w,
        kh,
        kw,
        oh,
        ow,
        ..
    } = *geom;
    let hw = oh * ow;
    for ci in 0..c_in {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let src = &col[row * hw..(row + 1) * hw];
                for oy in 0..oh {
                    let dst = ci * h * w + (oy * stride + ky) * w + kx;
                    for ox in 0..ow {
                        x[dst + ox * stride] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
}

/// Logistic function, evaluated without overflow for either sign.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log σ(x)
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn tree_leaf_probs(logits: &[f64], depth: usize) -> Vec<f64> {
    let nodes = (1usize << depth) - 1;
    if depth > LOG_SPACE_DEPTH {
        // log-reach of every node, root first
        let mut reach = vec![0.0; 2 * nodes + 1];
        for n in 0..nodes {
            let z = logits[n];
            reach[2 * n + 1] = reach[n] + log_sigmoid(z);
            reach[2 * n + 2] = reach[n] + log_sigmoid(-z);
        }
        reach[nodes..].iter().map(|v| v.exp()).collect()
    } else {
        let mut reach = vec![0.0; 2 * nodes + 1];
        reach[0] = 1.0;
        for n in 0..nodes {
            let d = sigmoid(logits[n]);
            reach[2 * n + 1] = reach[n] * d;
            reach[2 * n + 2] = reach[n] * (1.0 - d);
        }
        reach.split_off(nodes)
    }
}

/// Gradient w.r.t. the split logits.
///
/// With r_n the mass reaching node n and V_n the gradient-weighted mass of
/// leaves below n conditioned on reaching n, ∂L/∂d_n = r_n (V_left − V_right).
fn tree_leaves_backward(logits: &[f64], depth: usize, g: &[f64]) -> Vec<f64> {
    let nodes = (1usize << depth) - 1;
    let d: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
    let log_space = depth > LOG_SPACE_DEPTH;
    let mut reach = vec![0.0; 2 * nodes + 1];
    if log_space {
        for n in 0..nodes {
            reach[2 * n + 1] = reach[n] + log_sigmoid(logits[n]);
            reach[2 * n + 2] = reach[n] + log_sigmoid(-logits[n]);
        }
        reach.iter_mut().for_each(|r| *r = r.exp());
    } else {
        reach[0] = 1.0;
        for n in 0..nodes {
            reach[2 * n + 1] = reach[n] * d[n];
            reach[2 * n + 2] = reach[n] * (1.0 - d[n]);
        }
    }
    let mut down = vec![0.0; 2 * nodes + 1];
    down[nodes..].copy_from_slice(g);
    let mut gz = vec![0.0; nodes];
    for n in (0..nodes).rev() {
        let (l, r) = (down[2 * n + 1], down[2 * n + 2]);
        down[n] = d[n] * l + (1.0 - d[n]) * r;
        gz[n] = reach[n] * (l - r) * d[n] * (1.0 - d[n]);
    }
    gz
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, if `v` influenced the loss.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every bound parameter, in binding order. A parameter
    /// bound more than once appears once per binding.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> + '_ {
        self.params
            .iter()
            .filter_map(|&(id, v)| self.wrt(v).map(|g| (id, g)))
    }
}
