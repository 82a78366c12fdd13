//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its nodes. Calling
//! [`Graph::backward`] replays the tape in reverse and accumulates gradients
//! for every node that transitively depends on a variable leaf.
//!
//! Shape mismatches inside the graph are programming errors and panic; the
//! public model surface validates shapes before it builds a graph.

use std::rc::Rc;

use crate::mix::RowMix;
use crate::ssm::kernel::{self, ScanDims};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Silu,
    Tanh,
    Square,
    Abs,
    Exp,
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Sigmoid => sigmoid(x),
            Unary::Silu => x * sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Square => x * x,
            Unary::Abs => x.abs(),
            Unary::Exp => x.exp(),
        }
    }

    /// d(out)/d(in) given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Silu => {
                // y = x * s, so s is recoverable away from zero.
                let s = if x.abs() > 1e-2 { y / x } else { sigmoid(x) };
                s * (1.0 - y) + y
            }
            Unary::Tanh => 1.0 - y * y,
            Unary::Square => 2.0 * x,
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Exp => y,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

enum Op {
    Leaf,
    MatMul { a: Var, w: Var },
    MatMulTn { a: Var, b: Var },
    AddBias { a: Var, b: Var },
    MulBias { a: Var, g: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Unary(Var, Unary),
    LayerNorm { a: Var, rstd: Vec<f64> },
    Softmax(Var),
    NormalizeRows { a: Var, norms: Vec<f64> },
    Mean(Var),
    MeanRows(Var),
    SumLast(Var),
    MulScalarVar { a: Var, s: Var, idx: usize },
    RowMix { a: Var, mix: Rc<RowMix>, cols: usize },
    Gather { a: Var, index: Rc<Vec<usize>> },
    Reshape(Var),
    SliceOuter { a: Var, offset: usize },
    Concat { a: Var, b: Var },
    DwConv2d { x: Var, k: Var },
    Conv2d { x: Var, w: Var, cols: Vec<f64> },
    Scan(Box<ScanNode>),
}

struct ScanNode {
    u: Var,
    b: Var,
    c: Var,
    delta_log: Var,
    lambda_log: Var,
    dims: ScanDims,
    states: Vec<f64>,
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub struct Graph {
    nodes: Vec<Node>,
    training: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph that records everything needed for [`Graph::backward`].
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            training: true,
        }
    }

    /// A forward-only graph. Backward buffers are not kept and
    /// [`Graph::collapse`] releases intermediate values.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            training: false,
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Leaf that gradients flow into.
    pub fn variable(&mut self, t: Tensor) -> Var {
        let needs = self.training;
        self.push(t, Op::Leaf, needs)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad: needs_grad && self.training,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        self.training && vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Current tape length, for use with [`Graph::collapse`].
    pub fn mark(&self) -> usize {
        self.nodes.len()
    }

    /// In inference mode, drop every node created since `mark` and keep only
    /// `out`'s value as a fresh constant. A no-op while training.
    pub fn collapse(&mut self, mark: usize, out: Var) -> Var {
        if self.training || out.0 < mark {
            return out;
        }
        let value = std::mem::replace(&mut self.nodes[out.0].value, Tensor::zeros(&[0]));
        self.nodes.truncate(mark);
        self.constant(value)
    }

    // ---- linear algebra -------------------------------------------------

    /// `a [.., K] x w [K, N] -> [.., N]`.
    pub fn matmul(&mut self, a: Var, w: Var) -> Var {
        let (av, wv) = (self.value(a), self.value(w));
        assert_eq!(wv.shape().len(), 2, "matmul weight must be 2-D");
        let k = av.last_dim();
        assert_eq!(k, wv.shape()[0], "matmul inner dims {:?} x {:?}", av.shape(), wv.shape());
        let n = wv.shape()[1];
        let rows = av.rows();
        let mut out = vec![0.0; rows * n];
        gemm(rows, k, n, av.data(), false, wv.data(), false, &mut out, 0.0);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let needs = self.needs(&[a, w]);
        self.push(Tensor::new(&shape, out).unwrap(), Op::MatMul { a, w }, needs)
    }

    /// `a^T b` for `a [R, M]`, `b [R, N]` (leading axes flattened into R).
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, n) = (av.last_dim(), bv.last_dim());
        let r = av.rows();
        assert_eq!(r, bv.rows(), "matmul_tn row mismatch");
        let mut out = vec![0.0; m * n];
        gemm(m, r, n, av.data(), true, bv.data(), false, &mut out, 0.0);
        let needs = self.needs(&[a, b]);
        self.push(Tensor::new(&[m, n], out).unwrap(), Op::MatMulTn { a, b }, needs)
    }

    /// Broadcast-add `b [C]` over the last axis of `a`.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let c = av.last_dim();
        assert_eq!(bv.len(), c, "bias length");
        let mut out = av.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        let needs = self.needs(&[a, b]);
        self.push(out, Op::AddBias { a, b }, needs)
    }

    /// Broadcast-multiply by `g [C]` over the last axis of `a`.
    pub fn mul_bias(&mut self, a: Var, g: Var) -> Var {
        let (av, gv) = (self.value(a), self.value(g));
        let c = av.last_dim();
        assert_eq!(gv.len(), c, "scale length");
        let mut out = av.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, gg) in row.iter_mut().zip(gv.data()) {
                *o *= gg;
            }
        }
        let needs = self.needs(&[a, g]);
        self.push(out, Op::MulBias { a, g }, needs)
    }

    // ---- elementwise ----------------------------------------------------

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(av.shape(), data).unwrap();
        let needs = self.needs(&[a, b]);
        self.push(t, op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x * c);
        let needs = self.needs(&[a]);
        self.push(t, Op::Scale(a, c), needs)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x + c);
        let needs = self.needs(&[a]);
        self.push(t, Op::AddConst(a), needs)
    }

    pub fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let t = self.value(a).map(|x| kind.apply(x));
        let needs = self.needs(&[a]);
        self.push(t, Op::Unary(a, kind), needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Silu)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Abs)
    }

    // ---- normalisation and reductions -----------------------------------

    /// Standardise each row over the last axis (no affine transform).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let av = self.value(a);
        let c = av.last_dim();
        let mut out = av.clone();
        let mut rstd = Vec::with_capacity(av.rows());
        for row in out.data_mut().chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * r;
            }
            rstd.push(r);
        }
        let needs = self.needs(&[a]);
        self.push(out, Op::LayerNorm { a, rstd }, needs)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let c = av.last_dim();
        let mut out = av.clone();
        for row in out.data_mut().chunks_mut(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        let needs = self.needs(&[a]);
        self.push(out, Op::Softmax(a), needs)
    }

    /// Scale each row to unit L2 norm; `eps` regularises zero rows.
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let av = self.value(a);
        let c = av.last_dim();
        let mut out = av.clone();
        let mut norms = Vec::with_capacity(av.rows());
        for row in out.data_mut().chunks_mut(c) {
            let n = (row.iter().map(|x| x * x).sum::<f64>() + eps * eps).sqrt();
            for x in row.iter_mut() {
                *x /= n;
            }
            norms.push(n);
        }
        let needs = self.needs(&[a]);
        self.push(out, Op::NormalizeRows { a, norms }, needs)
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a).mean();
        let needs = self.needs(&[a]);
        self.push(Tensor::scalar(m), Op::Mean(a), needs)
    }

    /// Mean over every axis but the last: `[.., C] -> [C]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let c = av.last_dim();
        let r = av.rows() as f64;
        let mut out = vec![0.0; c];
        for row in av.data().chunks(c) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        for o in out.iter_mut() {
            *o /= r;
        }
        let needs = self.needs(&[a]);
        self.push(Tensor::new(&[c], out).unwrap(), Op::MeanRows(a), needs)
    }

    /// Sum over the last axis: `[.., C] -> [..]`.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let c = av.last_dim();
        let out: Vec<f64> = av.data().chunks(c).map(|r| r.iter().sum()).collect();
        let mut shape = av.shape()[..av.shape().len() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        let needs = self.needs(&[a]);
        self.push(Tensor::new(&shape, out).unwrap(), Op::SumLast(a), needs)
    }

    /// `a * s[idx]` where `s` is a small vector variable.
    pub fn mul_scalar_var(&mut self, a: Var, s: Var, idx: usize) -> Var {
        let k = self.value(s).data()[idx];
        let t = self.value(a).map(|x| x * k);
        let needs = self.needs(&[a, s]);
        self.push(t, Op::MulScalarVar { a, s, idx }, needs)
    }

    // ---- data movement --------------------------------------------------

    /// Apply a fixed row map to `a` viewed as `[groups, mix.in_rows, cols]`
    /// where `cols` is the product of the trailing axes after `row_axis`.
    pub fn row_mix(&mut self, a: Var, mix: Rc<RowMix>, row_axis: usize) -> Var {
        let av = self.value(a);
        let shape = av.shape();
        assert_eq!(shape[row_axis], mix.in_rows(), "row mix input rows");
        let cols: usize = shape[row_axis + 1..].iter().product();
        let out = mix.apply(av.data(), cols);
        let mut oshape = shape.to_vec();
        oshape[row_axis] = mix.out_rows();
        let needs = self.needs(&[a]);
        self.push(Tensor::new(&oshape, out).unwrap(), Op::RowMix { a, mix, cols }, needs)
    }

    /// `out.flat[i] = a.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, a: Var, index: Rc<Vec<usize>>, shape: &[usize]) -> Var {
        let av = self.value(a);
        assert_eq!(index.len(), shape.iter().product::<usize>(), "gather shape");
        let src = av.data();
        let data = index.iter().map(|&i| src[i]).collect();
        let needs = self.needs(&[a]);
        self.push(Tensor::new(shape, data).unwrap(), Op::Gather { a, index }, needs)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let av = self.value(a);
        assert_eq!(av.len(), shape.iter().product::<usize>(), "reshape size");
        let out = Tensor::new(shape, av.data().to_vec()).unwrap();
        let needs = self.needs(&[a]);
        self.push(out, Op::Reshape(a), needs)
    }

    /// Rows `start..end` of the leading axis.
    pub fn slice_outer(&mut self, a: Var, start: usize, end: usize) -> Var {
        let shape = self.shape(a).to_vec();
        let inner: usize = shape[1..].iter().product();
        assert!(start <= end && end <= shape[0], "slice bounds");
        let data = self.value(a).data()[start * inner..end * inner].to_vec();
        let mut oshape = shape;
        oshape[0] = end - start;
        let needs = self.needs(&[a]);
        let offset = start * inner;
        self.push(Tensor::new(&oshape, data).unwrap(), Op::SliceOuter { a, offset }, needs)
    }

    /// Swap the first two axes of `[A, B, ..]`.
    pub fn swap_outer(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let (d0, d1) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let mut index = Vec::with_capacity(d0 * d1 * inner);
        for j in 0..d1 {
            for i in 0..d0 {
                let base = (i * d1 + j) * inner;
                index.extend(base..base + inner);
            }
        }
        let mut oshape = shape;
        oshape.swap(0, 1);
        self.gather(a, Rc::new(index), &oshape)
    }

    /// Concatenate along the last axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (ca, cb) = (av.last_dim(), bv.last_dim());
        assert_eq!(av.rows(), bv.rows(), "concat row mismatch");
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for (ra, rb) in av.data().chunks(ca).zip(bv.data().chunks(cb)) {
            data.extend_from_slice(ra);
            data.extend_from_slice(rb);
        }
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = ca + cb;
        let needs = self.needs(&[a, b]);
        self.push(Tensor::new(&shape, data).unwrap(), Op::Concat { a, b }, needs)
    }

    // ---- convolutions ---------------------------------------------------

    /// Depthwise 2-D convolution, `x [B, H, W, C]`, `k [kh, kw, C]`,
    /// same-size output with a zero border.
    pub fn dwconv2d(&mut self, x: Var, k: Var) -> Var {
        let (xv, kv) = (self.value(x), self.value(k));
        let out = dwconv_forward(xv, kv);
        let needs = self.needs(&[x, k]);
        self.push(out, Op::DwConv2d { x, k }, needs)
    }

    /// Dense 2-D convolution, `x [B, H, W, Cin]`, `w [kh, kw, Cin, Cout]`,
    /// same-size output with a zero border.
    pub fn conv2d(&mut self, x: Var, w: Var) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        let xs = xv.shape();
        let ws = wv.shape();
        assert_eq!(xs.len(), 4, "conv2d input must be [B, H, W, C]");
        assert_eq!(ws.len(), 4, "conv2d weight must be [kh, kw, Cin, Cout]");
        assert_eq!(xs[3], ws[2], "conv2d channel mismatch");
        let (b, h, wd, cin) = (xs[0], xs[1], xs[2], xs[3]);
        let (kh, kw, cout) = (ws[0], ws[1], ws[3]);
        let cols = im2col(xv.data(), b, h, wd, cin, kh, kw);
        let kk = kh * kw * cin;
        let mut out = vec![0.0; b * h * wd * cout];
        gemm(b * h * wd, kk, cout, &cols, false, wv.data(), false, &mut out, 0.0);
        let needs = self.needs(&[x, w]);
        let cols = if needs { cols } else { Vec::new() };
        let t = Tensor::new(&[b, h, wd, cout], out).unwrap();
        self.push(t, Op::Conv2d { x, w, cols }, needs)
    }

    // ---- selective scan ---------------------------------------------------

    /// Batched diagonal selective scan.
    ///
    /// `u [B, L, E]` is the driven sequence, `b`/`c [B, L, S]` the input and
    /// output gates, `delta_log [E]` and `lambda_log [E, S]` the log-step and
    /// log-decay parameters. Returns `[B, L, E]`.
    pub fn selective_scan(
        &mut self,
        u: Var,
        b: Var,
        c: Var,
        delta_log: Var,
        lambda_log: Var,
    ) -> Var {
        let us = self.shape(u).to_vec();
        let bs = self.shape(b).to_vec();
        assert_eq!(us.len(), 3, "scan input must be [B, L, E]");
        assert_eq!(bs.len(), 3, "scan gates must be [B, L, S]");
        assert_eq!(self.shape(c), &bs[..], "scan gate shapes differ");
        assert_eq!(&us[..2], &bs[..2], "scan batch/length mismatch");
        let dims = ScanDims {
            batch: us[0],
            len: us[1],
            channels: us[2],
            state: bs[2],
        };
        assert_eq!(self.value(delta_log).len(), dims.channels, "delta length");
        assert_eq!(self.value(lambda_log).len(), dims.channels * dims.state, "lambda size");
        let delta: Vec<f64> = self.value(delta_log).data().iter().map(|v| v.exp()).collect();
        let lambda: Vec<f64> = self.value(lambda_log).data().iter().map(|v| v.exp()).collect();
        let decay = kernel::decay(&delta, &lambda, dims.state);
        let needs = self.needs(&[u, b, c, delta_log, lambda_log]);
        let run = kernel::scan_forward(
            dims,
            self.value(u).data(),
            self.value(b).data(),
            self.value(c).data(),
            &decay,
            &delta,
            None,
            needs,
        );
        let out = Tensor::new(&us, run.y).unwrap();
        let node = ScanNode {
            u,
            b,
            c,
            delta_log,
            lambda_log,
            dims,
            states: run.states.unwrap_or_default(),
        };
        self.push(out, Op::Scan(Box::new(node)), needs)
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Grads { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, w } => {
                let (av, wv) = (self.value(*a), self.value(*w));
                let k = av.last_dim();
                let n = wv.shape()[1];
                let rows = av.rows();
                if self.wants(*a) {
                    let mut da = vec![0.0; rows * k];
                    gemm(rows, n, k, g.data(), false, wv.data(), true, &mut da, 0.0);
                    self.accumulate(grads, *a, Tensor::new(av.shape(), da).unwrap());
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; k * n];
                    gemm(k, rows, n, av.data(), true, g.data(), false, &mut dw, 0.0);
                    self.accumulate(grads, *w, Tensor::new(wv.shape(), dw).unwrap());
                }
            }
            Op::MatMulTn { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, n) = (av.last_dim(), bv.last_dim());
                let r = av.rows();
                if self.wants(*a) {
                    let mut da = vec![0.0; r * m];
                    gemm(r, n, m, bv.data(), false, g.data(), true, &mut da, 0.0);
                    self.accumulate(grads, *a, Tensor::new(av.shape(), da).unwrap());
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; r * n];
                    gemm(r, m, n, av.data(), false, g.data(), false, &mut db, 0.0);
                    self.accumulate(grads, *b, Tensor::new(bv.shape(), db).unwrap());
                }
            }
            Op::AddBias { a, b } => {
                if self.wants(*b) {
                    let c = g.last_dim();
                    let mut db = vec![0.0; c];
                    for row in g.data().chunks(c) {
                        for (d, x) in db.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    let shape = self.shape(*b).to_vec();
                    self.accumulate(grads, *b, Tensor::new(&shape, db).unwrap());
                }
                self.accumulate(grads, *a, g.clone());
            }
            Op::MulBias { a, g: gam } => {
                let (av, gv) = (self.value(*a), self.value(*gam));
                let c = av.last_dim();
                if self.wants(*gam) {
                    let mut dg = vec![0.0; c];
                    for (grow, arow) in g.data().chunks(c).zip(av.data().chunks(c)) {
                        for ((d, gg), x) in dg.iter_mut().zip(grow).zip(arow) {
                            *d += gg * x;
                        }
                    }
                    self.accumulate(grads, *gam, Tensor::new(gv.shape(), dg).unwrap());
                }
                if self.wants(*a) {
                    let mut da = g.clone();
                    for row in da.data_mut().chunks_mut(c) {
                        for (d, s) in row.iter_mut().zip(gv.data()) {
                            *d *= s;
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    self.accumulate(grads, *a, zip(g, bv, |x, y| x * y));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, zip(g, av, |x, y| x * y));
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if self.wants(*a) {
                    self.accumulate(grads, *a, zip(g, bv, |x, y| x / y));
                }
                if self.wants(*b) {
                    // d(a/b)/db = -(a/b)/b
                    let t = zip(g, out, |x, y| x * y);
                    self.accumulate(grads, *b, zip(&t, bv, |x, y| -x / y));
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.map(|x| x * c));
            }
            Op::AddConst(a) => self.accumulate(grads, *a, g.clone()),
            Op::Unary(a, kind) => {
                let av = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(av.data())
                    .zip(out.data())
                    .map(|((gg, &x), &y)| gg * kind.derivative(x, y))
                    .collect();
                self.accumulate(grads, *a, Tensor::new(av.shape(), data).unwrap());
            }
            Op::LayerNorm { a, rstd } => {
                let c = out.last_dim();
                let mut da = vec![0.0; out.len()];
                for (r, ((drow, grow), yrow)) in da
                    .chunks_mut(c)
                    .zip(g.data().chunks(c))
                    .zip(out.data().chunks(c))
                    .enumerate()
                {
                    let mg = grow.iter().sum::<f64>() / c as f64;
                    let mgy = grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for ((d, gg), y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d = rstd[r] * (gg - mg - y * mgy);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(out.shape(), da).unwrap());
            }
            Op::Softmax(a) => {
                let c = out.last_dim();
                let mut da = vec![0.0; out.len()];
                for ((drow, grow), yrow) in da
                    .chunks_mut(c)
                    .zip(g.data().chunks(c))
                    .zip(out.data().chunks(c))
                {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for ((d, gg), y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d = y * (gg - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(out.shape(), da).unwrap());
            }
            Op::NormalizeRows { a, norms } => {
                let c = out.last_dim();
                let mut da = vec![0.0; out.len()];
                for (r, ((drow, grow), yrow)) in da
                    .chunks_mut(c)
                    .zip(g.data().chunks(c))
                    .zip(out.data().chunks(c))
                    .enumerate()
                {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for ((d, gg), y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d = (gg - y * dot) / norms[r];
                    }
                }
                self.accumulate(grads, *a, Tensor::new(out.shape(), da).unwrap());
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                let s = g.data()[0] / av.len() as f64;
                self.accumulate(grads, *a, Tensor::full(av.shape(), s));
            }
            Op::MeanRows(a) => {
                let av = self.value(*a);
                let c = av.last_dim();
                let r = av.rows() as f64;
                let mut da = vec![0.0; av.len()];
                for row in da.chunks_mut(c) {
                    for (d, gg) in row.iter_mut().zip(g.data()) {
                        *d = gg / r;
                    }
                }
                self.accumulate(grads, *a, Tensor::new(av.shape(), da).unwrap());
            }
            Op::SumLast(a) => {
                let av = self.value(*a);
                let c = av.last_dim();
                let mut da = vec![0.0; av.len()];
                for (row, gg) in da.chunks_mut(c).zip(g.data()) {
                    row.fill(*gg);
                }
                self.accumulate(grads, *a, Tensor::new(av.shape(), da).unwrap());
            }
            Op::MulScalarVar { a, s, idx } => {
                let av = self.value(*a);
                let sv = self.value(*s);
                if self.wants(*s) {
                    let dot: f64 = g.data().iter().zip(av.data()).map(|(x, y)| x * y).sum();
                    let mut ds = vec![0.0; sv.len()];
                    ds[*idx] = dot;
                    self.accumulate(grads, *s, Tensor::new(sv.shape(), ds).unwrap());
                }
                if self.wants(*a) {
                    let k = sv.data()[*idx];
                    self.accumulate(grads, *a, g.map(|x| x * k));
                }
            }
            Op::RowMix { a, mix, cols } => {
                let av = self.value(*a);
                let da = mix.apply_transpose(g.data(), *cols);
                self.accumulate(grads, *a, Tensor::new(av.shape(), da).unwrap());
            }
            Op::Gather { a, index } => {
                let av = self.value(*a);
                let mut da = vec![0.0; av.len()];
                for (gg, &i) in g.data().iter().zip(index.iter()) {
                    da[i] += gg;
                }
                self.accumulate(grads, *a, Tensor::new(av.shape(), da).unwrap());
            }
            Op::Reshape(a) => {
                let av = self.value(*a);
                self.accumulate(grads, *a, Tensor::new(av.shape(), g.data().to_vec()).unwrap());
            }
            Op::SliceOuter { a, offset } => {
                let av = self.value(*a);
                let mut da = vec![0.0; av.len()];
                da[*offset..*offset + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *a, Tensor::new(av.shape(), da).unwrap());
            }
            Op::Concat { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (ca, cb) = (av.last_dim(), bv.last_dim());
                let mut da = Vec::with_capacity(av.len());
                let mut db = Vec::with_capacity(bv.len());
                for row in g.data().chunks(ca + cb) {
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                self.accumulate(grads, *a, Tensor::new(av.shape(), da).unwrap());
                self.accumulate(grads, *b, Tensor::new(bv.shape(), db).unwrap());
            }
            Op::DwConv2d { x, k } => {
                let (xv, kv) = (self.value(*x), self.value(*k));
                let (dx, dk) = dwconv_backward(xv, kv, g);
                if self.wants(*x) {
                    self.accumulate(grads, *x, dx);
                }
                if self.wants(*k) {
                    self.accumulate(grads, *k, dk);
                }
            }
            Op::Conv2d { x, w, cols } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let xs = xv.shape();
                let ws = wv.shape();
                let (b, h, wd, cin) = (xs[0], xs[1], xs[2], xs[3]);
                let (kh, kw, cout) = (ws[0], ws[1], ws[3]);
                let kk = kh * kw * cin;
                let rows = b * h * wd;
                if self.wants(*w) {
                    let mut dw = vec![0.0; kk * cout];
                    gemm(kk, rows, cout, cols, true, g.data(), false, &mut dw, 0.0);
                    self.accumulate(grads, *w, Tensor::new(ws, dw).unwrap());
                }
                if self.wants(*x) {
                    let mut dcols = vec![0.0; rows * kk];
                    gemm(rows, cout, kk, g.data(), false, wv.data(), true, &mut dcols, 0.0);
                    let dx = col2im(&dcols, b, h, wd, cin, kh, kw);
                    self.accumulate(grads, *x, Tensor::new(xs, dx).unwrap());
                }
            }
            Op::Scan(node) => self.backprop_scan(node, g, grads),
        }
    }

    fn backprop_scan(&self, node: &ScanNode, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let dims = node.dims;
        let delta: Vec<f64> = self.value(node.delta_log).data().iter().map(|v| v.exp()).collect();
        let lambda: Vec<f64> = self.value(node.lambda_log).data().iter().map(|v| v.exp()).collect();
        let decay = kernel::decay(&delta, &lambda, dims.state);
        let sg = kernel::scan_backward(
            dims,
            self.value(node.u).data(),
            self.value(node.b).data(),
            self.value(node.c).data(),
            &decay,
            &delta,
            &node.states,
            g.data(),
        );
        let (e, s) = (dims.channels, dims.state);
        // Chain through decay = exp(-exp(delta) * lambda), delta = exp(delta_log),
        // lambda = exp(lambda_log).
        let mut d_delta_log = vec![0.0; e];
        let mut d_lambda_log = vec![0.0; e * s];
        for ei in 0..e {
            let ed = delta[ei].exp();
            let mut dd = sg.d_delta[ei];
            for si in 0..s {
                let i = ei * s + si;
                let da = sg.d_decay[i];
                dd += da * (-decay[i] * ed * lambda[i]);
                d_lambda_log[i] = da * (-decay[i] * ed) * lambda[i];
            }
            d_delta_log[ei] = dd * delta[ei];
        }
        let shape_of = |v: Var| self.shape(v).to_vec();
        self.accumulate(grads, node.u, Tensor::new(&shape_of(node.u), sg.du).unwrap());
        self.accumulate(grads, node.b, Tensor::new(&shape_of(node.b), sg.db).unwrap());
        self.accumulate(grads, node.c, Tensor::new(&shape_of(node.c), sg.dc).unwrap());
        self.accumulate(
            grads,
            node.delta_log,
            Tensor::new(&shape_of(node.delta_log), d_delta_log).unwrap(),
        );
        self.accumulate(
            grads,
            node.lambda_log,
            Tensor::new(&shape_of(node.lambda_log), d_lambda_log).unwrap(),
        );
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).unwrap()
}

/// `c = a * b + beta * c` for row-major operands, optionally transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access is in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn dwconv_forward(x: &Tensor, k: &Tensor) -> Tensor {
    let xs = x.shape();
    let ks = k.shape();
    assert_eq!(xs.len(), 4, "dwconv input must be [B, H, W, C]");
    assert_eq!(ks.len(), 3, "dwconv kernel must be [kh, kw, C]");
    assert_eq!(xs[3], ks[2], "dwconv channel mismatch");
    let (b, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
    let (kh, kw) = (ks[0], ks[1]);
    let (ph, pw) = (kh / 2, kw / 2);
    let xd = x.data();
    let kd = k.data();
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let o = ((bi * h + y) * w + xx) * c;
                let orow = &mut out[o..o + c];
                for i in 0..kh {
                    let sy = y as isize + i as isize - ph as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for j in 0..kw {
                        let sx = xx as isize + j as isize - pw as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let s = ((bi * h + sy as usize) * w + sx as usize) * c;
                        let krow = &kd[(i * kw + j) * c..(i * kw + j + 1) * c];
                        for ((ov, xv), kv) in orow.iter_mut().zip(&xd[s..s + c]).zip(krow) {
                            *ov += xv * kv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(xs, out).unwrap()
}

fn dwconv_backward(x: &Tensor, k: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let xs = x.shape();
    let ks = k.shape();
    let (b, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
    let (kh, kw) = (ks[0], ks[1]);
    let (ph, pw) = (kh / 2, kw / 2);
    let xd = x.data();
    let kd = k.data();
    let gd = g.data();
    let mut dx = vec![0.0; x.len()];
    let mut dk = vec![0.0; k.len()];
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let o = ((bi * h + y) * w + xx) * c;
                let grow = &gd[o..o + c];
                for i in 0..kh {
                    let sy = y as isize + i as isize - ph as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for j in 0..kw {
                        let sx = xx as isize + j as isize - pw as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let s = ((bi * h + sy as usize) * w + sx as usize) * c;
                        let kofs = (i * kw + j) * c;
                        for ch in 0..c {
                            dx[s + ch] += grow[ch] * kd[kofs + ch];
                            dk[kofs + ch] += grow[ch] * xd[s + ch];
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::new(xs, dx).unwrap(),
        Tensor::new(ks, dk).unwrap(),
    )
}

fn im2col(x: &[f64], b: usize, h: usize, w: usize, c: usize, kh: usize, kw: usize) -> Vec<f64> {
    let kk = kh * kw * c;
    let (ph, pw) = (kh / 2, kw / 2);
    let mut cols = vec![0.0; b * h * w * kk];
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let row = ((bi * h + y) * w + xx) * kk;
                for i in 0..kh {
                    let sy = y as isize + i as isize - ph as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for j in 0..kw {
                        let sx = xx as isize + j as isize - pw as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let s = ((bi * h + sy as usize) * w + sx as usize) * c;
                        let d = row + (i * kw + j) * c;
                        cols[d..d + c].copy_from_slice(&x[s..s + c]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], b: usize, h: usize, w: usize, c: usize, kh: usize, kw: usize) -> Vec<f64> {
    let kk = kh * kw * c;
    let (ph, pw) = (kh / 2, kw / 2);
    let mut x = vec![0.0; b * h * w * c];
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let row = ((bi * h + y) * w + xx) * kk;
                for i in 0..kh {
                    let sy = y as isize + i as isize - ph as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for j in 0..kw {
                        let sx = xx as isize + j as isize - pw as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let s = ((bi * h + sy as usize) * w + sx as usize) * c;
                        let d = row + (i * kw + j) * c;
                        for ch in 0..c {
                            x[s + ch] += cols[d + ch];
                        }
                    }
                }
            }
        }
    }
    x
}
