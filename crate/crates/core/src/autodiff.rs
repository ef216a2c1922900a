//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles in
//! execution order. [`Tape::backward`] walks the records once in reverse,
//! accumulating vector-Jacobian products into per-node gradient buffers.
//! One tape serves one forward pass on one thread.

use std::cell::{Cell, RefCell};
use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{kernels, Tensor};

/// Lower/upper clamp applied to probabilities inside [`Var::bce`].
pub const BCE_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    MatMulNt,
    Add,
    Mul,
    Scale,
    AddRow,
    Swish,
    Sigmoid,
    SoftmaxRows,
    LayerNorm,
    ConvPointwise,
    ConvDepthwise,
    Dropout,
    SliceCols,
    ConcatCols,
    MeanRows,
    Sum,
    Reshape,
    Bce,
}

impl OpKind {
    pub const ALL: [OpKind; 20] = [
        OpKind::Leaf,
        OpKind::MatMul,
        OpKind::MatMulNt,
        OpKind::Add,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::AddRow,
        OpKind::Swish,
        OpKind::Sigmoid,
        OpKind::SoftmaxRows,
        OpKind::LayerNorm,
        OpKind::ConvPointwise,
        OpKind::ConvDepthwise,
        OpKind::Dropout,
        OpKind::SliceCols,
        OpKind::ConcatCols,
        OpKind::MeanRows,
        OpKind::Sum,
        OpKind::Reshape,
        OpKind::Bce,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::MatMulNt => "matmul_nt",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddRow => "add_row",
            OpKind::Swish => "swish",
            OpKind::Sigmoid => "sigmoid",
            OpKind::SoftmaxRows => "softmax_rows",
            OpKind::LayerNorm => "layer_norm",
            OpKind::ConvPointwise => "conv1d_pointwise",
            OpKind::ConvDepthwise => "conv1d_depthwise",
            OpKind::Dropout => "dropout",
            OpKind::SliceCols => "slice_cols",
            OpKind::ConcatCols => "concat_cols",
            OpKind::MeanRows => "mean_rows",
            OpKind::Sum => "sum",
            OpKind::Reshape => "reshape",
            OpKind::Bce => "bce",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRow(usize, usize),
    Swish(usize),
    Sigmoid(usize),
    SoftmaxRows(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConvPointwise(usize, usize, usize),
    ConvDepthwise {
        x: usize,
        kernel: usize,
        bias: usize,
        pad: usize,
    },
    Dropout(usize, Vec<f64>),
    SliceCols {
        x: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    MeanRows(usize),
    Sum(usize),
    Reshape(usize),
    Bce {
        p: usize,
        targets: Vec<f64>,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::MatMulNt(..) => OpKind::MatMulNt,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Swish(..) => OpKind::Swish,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::SoftmaxRows(..) => OpKind::SoftmaxRows,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::ConvPointwise(..) => OpKind::ConvPointwise,
            Op::ConvDepthwise { .. } => OpKind::ConvDepthwise,
            Op::Dropout(..) => OpKind::Dropout,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::MeanRows(..) => OpKind::MeanRows,
            Op::Sum(..) => OpKind::Sum,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Bce { .. } => OpKind::Bce,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: bool,
    fault: Cell<Option<OpKind>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
            fault: Cell::new(None),
        }
    }

    /// A tape that keeps values but drops backward bookkeeping.
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Test hook: negate every gradient flowing back through ops of `kind`.
    pub fn inject_fault(&self, kind: Option<OpKind>) {
        self.fault.set(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let op = if self.grad_enabled { op } else { Op::Leaf };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    /// Horizontal concatenation of rank-2 tensors with equal row counts.
    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let values: Vec<Tensor> = parts.iter().map(|p| p.value()).collect();
        let rows = rows_of(&values[0], "concat_cols")?;
        let mut total = 0;
        for v in &values {
            let (r, c) = dims2_strict(v, "concat_cols")?;
            if r != rows {
                return Err(Error::dim("concat_cols", values[0].shape(), v.shape()));
            }
            total += c;
        }
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for v in &values {
            let c = v.shape()[1];
            for i in 0..rows {
                out[i * total + offset..i * total + offset + c]
                    .copy_from_slice(&v.data()[i * c..(i + 1) * c]);
            }
            offset += c;
        }
        let ids = parts.iter().map(|p| p.id).collect();
        let _ = first;
        Ok(self.push(Tensor::new(&[rows, total], out)?, Op::ConcatCols(ids)))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !self.grad_enabled {
            return Err(Error::Contract("backward on an inference tape".into()));
        }
        let nodes = self.nodes.borrow();
        let seed = &nodes[loss.id].value;
        if seed.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                seed.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        let fault = self.fault.get();

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(mut g) = grads[id].take() else {
                continue;
            };
            if fault == Some(node.op.kind()) {
                g.iter_mut().for_each(|v| *v = -*v);
            }
            propagate(&nodes, id, &g, &mut grads);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| g.map(|g| Tensor::new(nodes[id].value.shape(), g).expect("grad shape")))
            .collect();
        Ok(Gradients { grads })
    }
}

/// Gradient buffers from one backward pass, indexed by tape node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `var`; `None` if the loss does not depend on it.
    pub fn wrt(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
    }
}

fn dims2_strict(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(Error::dim(op, t.shape(), &[])),
    }
}

fn rows_of(t: &Tensor, op: &'static str) -> Result<usize> {
    dims2_strict(t, op).map(|(r, _)| r)
}

fn vector_len(t: &Tensor, op: &'static str) -> Result<usize> {
    match *t.shape() {
        [n] => Ok(n),
        _ => Err(Error::dim(op, t.shape(), &[])),
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Tensor {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes"
        );
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs);
        let (a, b) = (self.value(), rhs.value());
        let (m, k) = dims2_strict(&a, "matmul")?;
        let (k2, n) = dims2_strict(&b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", a.shape(), b.shape()));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nn(a.data(), b.data(), &mut out, m, k, n);
        Ok(self
            .tape
            .push(Tensor::new(&[m, n], out)?, Op::MatMul(self.id, rhs.id)))
    }

    /// `self · rhsᵀ`
    pub fn matmul_nt(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs);
        let (a, b) = (self.value(), rhs.value());
        let (m, k) = dims2_strict(&a, "matmul_nt")?;
        let (n, k2) = dims2_strict(&b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::dim("matmul_nt", a.shape(), b.shape()));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt(a.data(), b.data(), &mut out, m, k, n);
        Ok(self
            .tape
            .push(Tensor::new(&[m, n], out)?, Op::MatMulNt(self.id, rhs.id)))
    }

    fn zip_same(
        self,
        rhs: Var<'t>,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        self.same_tape(&rhs);
        let (a, b) = (self.value(), rhs.value());
        if a.shape() != b.shape() {
            return Err(Error::dim(op, a.shape(), b.shape()));
        }
        let out = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape(), out)
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let out = self.zip_same(rhs, "add", |x, y| x + y)?;
        Ok(self.tape.push(out, Op::Add(self.id, rhs.id)))
    }

    /// Elementwise product.
    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let out = self.zip_same(rhs, "mul", |x, y| x * y)?;
        Ok(self.tape.push(out, Op::Mul(self.id, rhs.id)))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let out = self.value().map(|v| v * c);
        self.tape.push(out, Op::Scale(self.id, c))
    }

    /// Broadcast-add a length-`n` vector to every row of a `m×n` matrix.
    pub fn add_row(self, bias: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&bias);
        let (x, b) = (self.value(), bias.value());
        let (m, n) = dims2_strict(&x, "add_row")?;
        if vector_len(&b, "add_row")? != n {
            return Err(Error::dim("add_row", x.shape(), b.shape()));
        }
        let mut out = x.into_vec();
        for row in out.chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        Ok(self
            .tape
            .push(Tensor::new(&[m, n], out)?, Op::AddRow(self.id, bias.id)))
    }

    pub fn sigmoid(self) -> Var<'t> {
        let out = self.value().map(sigmoid);
        self.tape.push(out, Op::Sigmoid(self.id))
    }

    /// `x · sigmoid(x)`
    pub fn swish(self) -> Var<'t> {
        let out = self.value().map(|v| v * sigmoid(v));
        self.tape.push(out, Op::Swish(self.id))
    }

    /// Row-wise softmax of a rank-2 tensor, max-shifted per row.
    pub fn softmax_rows(self) -> Result<Var<'t>> {
        let x = self.value();
        let (m, n) = dims2_strict(&x, "softmax_rows")?;
        let mut out = x.into_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        Ok(self
            .tape
            .push(Tensor::new(&[m, n], out)?, Op::SoftmaxRows(self.id)))
    }

    /// Per-row standardization followed by the affine `gamma`, `beta`.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        self.same_tape(&gamma);
        self.same_tape(&beta);
        let (x, g, b) = (self.value(), gamma.value(), beta.value());
        let (m, d) = dims2_strict(&x, "layer_norm")?;
        if vector_len(&g, "layer_norm")? != d {
            return Err(Error::dim("layer_norm", x.shape(), g.shape()));
        }
        if vector_len(&b, "layer_norm")? != d {
            return Err(Error::dim("layer_norm", x.shape(), b.shape()));
        }
        if !(eps >= 0.0) {
            return Err(Error::Config(format!("layer_norm eps {eps} must be >= 0")));
        }
        let mut xhat = vec![0.0; m * d];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * d];
        for i in 0..m {
            let row = &x.data()[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g.data()[j] + b.data()[j];
            }
        }
        Ok(self.tape.push(
            Tensor::new(&[m, d], out)?,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
            },
        ))
    }

    /// Kernel-size-1 convolution: `x[T×C_in] · w[C_in×C_out] + b`.
    pub fn conv1d_pointwise(self, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&w);
        self.same_tape(&b);
        let (x, wv, bv) = (self.value(), w.value(), b.value());
        let (t, c_in) = dims2_strict(&x, "conv1d_pointwise")?;
        let (c_in2, c_out) = dims2_strict(&wv, "conv1d_pointwise")?;
        if c_in != c_in2 {
            return Err(Error::dim("conv1d_pointwise", x.shape(), wv.shape()));
        }
        if vector_len(&bv, "conv1d_pointwise")? != c_out {
            return Err(Error::dim("conv1d_pointwise", wv.shape(), bv.shape()));
        }
        let mut out = vec![0.0; t * c_out];
        kernels::matmul_nn(x.data(), wv.data(), &mut out, t, c_in, c_out);
        for row in out.chunks_mut(c_out) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        Ok(self.tape.push(
            Tensor::new(&[t, c_out], out)?,
            Op::ConvPointwise(self.id, w.id, b.id),
        ))
    }

    /// Alias of [`Var::conv1d_pointwise`] for per-timestep linear layers.
    pub fn linear(self, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        self.conv1d_pointwise(w, b)
    }

    /// Per-channel cross-correlation over time with zero padding.
    ///
    /// `x` is `T×C`, `kernel` is `C×K` with odd `K`, and `pad` must be
    /// `(K-1)/2` so the output keeps length `T`.
    pub fn conv1d_depthwise(self, kernel: Var<'t>, bias: Var<'t>, pad: usize) -> Result<Var<'t>> {
        self.same_tape(&kernel);
        self.same_tape(&bias);
        let (x, k, b) = (self.value(), kernel.value(), bias.value());
        let (t, c) = dims2_strict(&x, "conv1d_depthwise")?;
        let (c2, ks) = dims2_strict(&k, "conv1d_depthwise")?;
        if c != c2 {
            return Err(Error::dim("conv1d_depthwise", x.shape(), k.shape()));
        }
        if vector_len(&b, "conv1d_depthwise")? != c {
            return Err(Error::dim("conv1d_depthwise", k.shape(), b.shape()));
        }
        check_depthwise_geometry(ks, pad)?;
        let out = depthwise_forward(x.data(), k.data(), b.data(), t, c, ks, pad);
        Ok(self.tape.push(
            Tensor::new(&[t, c], out)?,
            Op::ConvDepthwise {
                x: self.id,
                kernel: kernel.id,
                bias: bias.id,
                pad,
            },
        ))
    }

    /// Inverted dropout. Identity when `training` is false or `p == 0`.
    pub fn dropout(self, p: f64, training: bool, rng: &mut impl Rng) -> Result<Var<'t>> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} not in [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(self);
        }
        let x = self.value();
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..x.len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        Ok(self
            .tape
            .push(Tensor::new(x.shape(), out)?, Op::Dropout(self.id, mask)))
    }

    /// Columns `start..start+len` of a rank-2 tensor.
    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (m, n) = dims2_strict(&x, "slice_cols")?;
        if len == 0 || start + len > n {
            return Err(Error::dim("slice_cols", x.shape(), &[start, len]));
        }
        let mut out = Vec::with_capacity(m * len);
        for row in x.data().chunks(n) {
            out.extend_from_slice(&row[start..start + len]);
        }
        Ok(self.tape.push(
            Tensor::new(&[m, len], out)?,
            Op::SliceCols { x: self.id, start },
        ))
    }

    /// Column means of a `T×D` tensor, as `1×D`.
    pub fn mean_rows(self) -> Result<Var<'t>> {
        let x = self.value();
        let (m, n) = dims2_strict(&x, "mean_rows")?;
        let mut out = vec![0.0; n];
        for row in x.data().chunks(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= m as f64);
        Ok(self
            .tape
            .push(Tensor::new(&[1, n], out)?, Op::MeanRows(self.id)))
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.value().data().iter().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().reshape(shape)?;
        Ok(self.tape.push(out, Op::Reshape(self.id)))
    }

    /// Mean binary cross-entropy of probabilities `self` against 0/1 `targets`.
    ///
    /// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]`; the gradient
    /// is zero where the clamp is active.
    pub fn bce(self, targets: &[f64]) -> Result<Var<'t>> {
        let p = self.value();
        if p.len() != targets.len() || targets.is_empty() {
            return Err(Error::dim("bce", p.shape(), &[targets.len()]));
        }
        let n = targets.len() as f64;
        let loss = p
            .data()
            .iter()
            .zip(targets)
            .map(|(&pi, &y)| {
                let pc = pi.clamp(BCE_EPS, 1.0 - BCE_EPS);
                -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln())
            })
            .sum::<f64>()
            / n;
        Ok(self.tape.push(
            Tensor::scalar(loss),
            Op::Bce {
                p: self.id,
                targets: targets.to_vec(),
            },
        ))
    }
}

pub(crate) fn check_depthwise_geometry(kernel_size: usize, pad: usize) -> Result<()> {
    if kernel_size.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "depthwise kernel size {kernel_size} must be odd"
        )));
    }
    if pad != (kernel_size - 1) / 2 {
        return Err(Error::Config(format!(
            "depthwise padding {pad} must equal (kernel_size - 1) / 2 = {}",
            (kernel_size - 1) / 2
        )));
    }
    Ok(())
}

fn depthwise_forward(
    x: &[f64],
    k: &[f64],
    b: &[f64],
    t: usize,
    c: usize,
    ks: usize,
    pad: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; t * c];
    for ti in 0..t {
        let row = &mut out[ti * c..(ti + 1) * c];
        row.copy_from_slice(b);
        for j in 0..ks {
            let src = ti + j;
            if src < pad || src - pad >= t {
                continue;
            }
            let xrow = &x[(src - pad) * c..(src - pad + 1) * c];
            for ch in 0..c {
                row[ch] += k[ch * ks + j] * xrow[ch];
            }
        }
    }
    out
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, len: usize) -> &mut [f64] {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

/// Pushes the upstream gradient `g` of node `id` into its inputs.
fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let val = |i: usize| &nodes[i].value;
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul(a, b) => {
            let (m, k) = val(a).dims2().unwrap();
            let n = val(b).shape()[1];
            let bv = val(b).data();
            let ga = accumulate(grads, a, m * k);
            kernels::matmul_nt(g, bv, ga, m, n, k);
            let av = val(a).data();
            let gb = accumulate(grads, b, k * n);
            kernels::matmul_tn(av, g, gb, m, k, n);
        }
        &Op::MatMulNt(a, b) => {
            // C = A Bᵀ: dA = dC B, dB = dCᵀ A
            let (m, k) = val(a).dims2().unwrap();
            let n = val(b).shape()[0];
            let bv = val(b).data();
            let ga = accumulate(grads, a, m * k);
            kernels::matmul_nn(g, bv, ga, m, n, k);
            let av = val(a).data();
            let gb = accumulate(grads, b, n * k);
            kernels::matmul_tn(g, av, gb, m, n, k);
        }
        &Op::Add(a, b) => {
            for target in [a, b] {
                let gt = accumulate(grads, target, g.len());
                gt.iter_mut().zip(g).for_each(|(o, v)| *o += v);
            }
        }
        &Op::Mul(a, b) => {
            let (av, bv) = (val(a).data(), val(b).data());
            let ga = accumulate(grads, a, g.len());
            for i in 0..g.len() {
                ga[i] += g[i] * bv[i];
            }
            let gb = accumulate(grads, b, g.len());
            for i in 0..g.len() {
                gb[i] += g[i] * av[i];
            }
        }
        &Op::Scale(x, c) => {
            let gx = accumulate(grads, x, g.len());
            gx.iter_mut().zip(g).for_each(|(o, v)| *o += c * v);
        }
        &Op::AddRow(x, b) => {
            let n = val(b).len();
            let gx = accumulate(grads, x, g.len());
            gx.iter_mut().zip(g).for_each(|(o, v)| *o += v);
            let gb = accumulate(grads, b, n);
            for row in g.chunks(n) {
                gb.iter_mut().zip(row).for_each(|(o, v)| *o += v);
            }
        }
        &Op::Sigmoid(x) => {
            let y = node.value.data();
            let gx = accumulate(grads, x, g.len());
            for i in 0..g.len() {
                gx[i] += g[i] * y[i] * (1.0 - y[i]);
            }
        }
        &Op::Swish(x) => {
            let xv = val(x).data();
            let gx = accumulate(grads, x, g.len());
            for i in 0..g.len() {
                let s = sigmoid(xv[i]);
                gx[i] += g[i] * s * (1.0 + xv[i] * (1.0 - s));
            }
        }
        &Op::SoftmaxRows(x) => {
            let y = node.value.data();
            let n = node.value.shape()[1];
            let gx = accumulate(grads, x, g.len());
            for ((grow, yrow), orow) in g.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)) {
                let inner: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                for j in 0..n {
                    orow[j] += yrow[j] * (grow[j] - inner);
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let d = val(*gamma).len();
            let gv = val(*gamma).data();
            {
                let gg = accumulate(grads, *gamma, d);
                for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        gg[j] += grow[j] * hrow[j];
                    }
                }
            }
            {
                let gb = accumulate(grads, *beta, d);
                for grow in g.chunks(d) {
                    gb.iter_mut().zip(grow).for_each(|(o, v)| *o += v);
                }
            }
            let gx = accumulate(grads, *x, g.len());
            let mut dxhat = vec![0.0; d];
            for (i, (grow, hrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                for j in 0..d {
                    dxhat[j] = grow[j] * gv[j];
                }
                let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
                let mean_dxhat_xhat =
                    dxhat.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                let orow = &mut gx[i * d..(i + 1) * d];
                for j in 0..d {
                    orow[j] += inv_std[i] * (dxhat[j] - mean_dxhat - hrow[j] * mean_dxhat_xhat);
                }
            }
        }
        &Op::ConvPointwise(x, w, b) => {
            let (t, c_in) = val(x).dims2().unwrap();
            let c_out = val(b).len();
            let wv = val(w).data();
            let gx = accumulate(grads, x, t * c_in);
            kernels::matmul_nt(g, wv, gx, t, c_out, c_in);
            let xv = val(x).data();
            let gw = accumulate(grads, w, c_in * c_out);
            kernels::matmul_tn(xv, g, gw, t, c_in, c_out);
            let gb = accumulate(grads, b, c_out);
            for row in g.chunks(c_out) {
                gb.iter_mut().zip(row).for_each(|(o, v)| *o += v);
            }
        }
        &Op::ConvDepthwise {
            x,
            kernel,
            bias,
            pad,
        } => {
            let (t, c) = val(x).dims2().unwrap();
            let ks = val(kernel).shape()[1];
            let (xv, kv) = (val(x).data(), val(kernel).data());
            {
                let gk = accumulate(grads, kernel, c * ks);
                for ti in 0..t {
                    let grow = &g[ti * c..(ti + 1) * c];
                    for j in 0..ks {
                        let src = ti + j;
                        if src < pad || src - pad >= t {
                            continue;
                        }
                        let xrow = &xv[(src - pad) * c..(src - pad + 1) * c];
                        for ch in 0..c {
                            gk[ch * ks + j] += grow[ch] * xrow[ch];
                        }
                    }
                }
            }
            {
                let gx = accumulate(grads, x, t * c);
                for ti in 0..t {
                    let grow = &g[ti * c..(ti + 1) * c];
                    for j in 0..ks {
                        let src = ti + j;
                        if src < pad || src - pad >= t {
                            continue;
                        }
                        let orow = &mut gx[(src - pad) * c..(src - pad + 1) * c];
                        for ch in 0..c {
                            orow[ch] += kv[ch * ks + j] * grow[ch];
                        }
                    }
                }
            }
            let gb = accumulate(grads, bias, c);
            for row in g.chunks(c) {
                gb.iter_mut().zip(row).for_each(|(o, v)| *o += v);
            }
        }
        Op::Dropout(x, mask) => {
            let gx = accumulate(grads, *x, g.len());
            for i in 0..g.len() {
                gx[i] += g[i] * mask[i];
            }
        }
        &Op::SliceCols { x, start } => {
            let (m, n) = val(x).dims2().unwrap();
            let len = node.value.shape()[1];
            let gx = accumulate(grads, x, m * n);
            for i in 0..m {
                for j in 0..len {
                    gx[i * n + start + j] += g[i * len + j];
                }
            }
        }
        Op::ConcatCols(parts) => {
            let (m, total) = node.value.dims2().unwrap();
            let mut offset = 0;
            for &p in parts {
                let c = val(p).shape()[1];
                let gp = accumulate(grads, p, m * c);
                for i in 0..m {
                    for j in 0..c {
                        gp[i * c + j] += g[i * total + offset + j];
                    }
                }
                offset += c;
            }
        }
        &Op::MeanRows(x) => {
            let (m, n) = val(x).dims2().unwrap();
            let gx = accumulate(grads, x, m * n);
            let inv = 1.0 / m as f64;
            for row in gx.chunks_mut(n) {
                for j in 0..n {
                    row[j] += g[j] * inv;
                }
            }
        }
        &Op::Sum(x) => {
            let len = val(x).len();
            let gx = accumulate(grads, x, len);
            gx.iter_mut().for_each(|o| *o += g[0]);
        }
        &Op::Reshape(x) => {
            let gx = accumulate(grads, x, g.len());
            gx.iter_mut().zip(g).for_each(|(o, v)| *o += v);
        }
        Op::Bce { p, targets } => {
            let pv = val(*p).data();
            let n = targets.len() as f64;
            let gp = accumulate(grads, *p, targets.len());
            for i in 0..targets.len() {
                let pi = pv[i];
                if pi <= BCE_EPS || pi >= 1.0 - BCE_EPS {
                    continue;
                }
                let y = targets[i];
                gp[i] += g[0] * (-(y / pi) + (1.0 - y) / (1.0 - pi)) / n;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_zero() {
        let tape = Tape::new();
        let i2 = tape.leaf(Tensor::eye(2));
        let m = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(i2.matmul(m).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = tape.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
        let b = tape.leaf(t(&[2, 1], &[0.0, 5.0]));
        assert_eq!(a.matmul(b).unwrap().value().data(), &[0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2, 3]));
        let err = a.matmul(b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
        assert!(matches!(a.matmul(b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn softmax_basic_rows() {
        let tape = Tape::new();
        let y = tape.leaf(t(&[1, 2], &[0.0, 0.0])).softmax_rows().unwrap();
        assert_eq!(y.value().data(), &[0.5, 0.5]);
        for c in [-50.0, 0.0, 3.5, 700.0] {
            let y = tape.leaf(t(&[1, 3], &[c, c, c])).softmax_rows().unwrap();
            for v in y.value().data() {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn softmax_large_logits_do_not_overflow() {
        // exp(-1000) / (1 + exp(-1000)) underflows to 0 in f64; the exact
        // value is ~5e-435, far below 1e-12.
        let tape = Tape::new();
        let y = tape.leaf(t(&[1, 2], &[1000.0, 0.0])).softmax_rows().unwrap();
        let v = y.value();
        assert!((v.data()[0] - 1.0).abs() < 1e-12);
        assert!(v.data()[1].abs() < 1e-12);
        assert!(v.all_finite());
    }

    #[test]
    fn layer_norm_edge_rows() {
        let tape = Tape::new();
        let g = tape.leaf(Tensor::ones(&[4]));
        let b = tape.leaf(Tensor::zeros(&[4]));
        let y = tape
            .leaf(t(&[1, 4], &[3.0, 3.0, 3.0, 3.0]))
            .layer_norm(g, b, 1e-5)
            .unwrap();
        assert!(y.value().data().iter().all(|v| *v == 0.0));

        let g2 = tape.leaf(Tensor::ones(&[2]));
        let b2 = tape.leaf(Tensor::zeros(&[2]));
        let y = tape
            .leaf(t(&[1, 2], &[1.0, -1.0]))
            .layer_norm(g2, b2, 1e-14)
            .unwrap();
        let v = y.value();
        assert!((v.data()[0] - 1.0).abs() < 1e-12 && (v.data()[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn swish_values() {
        let tape = Tape::new();
        let y = tape.leaf(t(&[3], &[0.0, 20.0, -40.0])).swish().value();
        assert_eq!(y.data()[0], 0.0);
        // 20·σ(20) = 20 - 20·e^-20/(1+e^-20) ≈ 20 - 4.1e-8
        assert!((y.data()[1] - 20.0).abs() < 1e-6);
        assert!(y.data()[2].abs() < 1e-15);
    }

    #[test]
    fn pointwise_identity_and_single_step() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let w = tape.leaf(Tensor::eye(2));
        let b = tape.leaf(Tensor::zeros(&[2]));
        assert_eq!(x.conv1d_pointwise(w, b).unwrap().value(), x.value());

        let x1 = tape.leaf(t(&[1, 2], &[1.0, -2.0]));
        let w1 = tape.leaf(t(&[2, 3], &[1.0, 0.5, 0.0, 2.0, 1.0, -1.0]));
        let b1 = tape.leaf(t(&[3], &[0.25, 0.0, 1.0]));
        let y = x1.conv1d_pointwise(w1, b1).unwrap().value();
        assert_eq!(y.data(), &[1.0 - 4.0 + 0.25, 0.5 - 2.0, 2.0 + 1.0]);
    }

    #[test]
    fn depthwise_identity_and_overlap_counts() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[4, 2], &[1.0, -1.0, 2.0, 0.5, 3.0, 7.0, -4.0, 2.0]));
        let mut delta = vec![0.0; 2 * 3];
        delta[1] = 1.0;
        delta[3 + 1] = 1.0;
        let k = tape.leaf(t(&[2, 3], &delta));
        let b = tape.leaf(Tensor::zeros(&[2]));
        assert_eq!(x.conv1d_depthwise(k, b, 1).unwrap().value(), x.value());

        let ones = tape.leaf(Tensor::ones(&[5, 1]));
        let k3 = tape.leaf(Tensor::ones(&[1, 3]));
        let b1 = tape.leaf(Tensor::zeros(&[1]));
        let y = ones.conv1d_depthwise(k3, b1, 1).unwrap().value();
        assert_eq!(y.data(), &[2.0, 3.0, 3.0, 3.0, 2.0]);
    }

    #[test]
    fn depthwise_rejects_bad_geometry() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[5, 1]));
        let b = tape.leaf(Tensor::zeros(&[1]));
        let k4 = tape.leaf(Tensor::ones(&[1, 4]));
        assert!(matches!(x.conv1d_depthwise(k4, b, 2), Err(Error::Config(_))));
        let k3 = tape.leaf(Tensor::ones(&[1, 3]));
        assert!(matches!(x.conv1d_depthwise(k3, b, 2), Err(Error::Config(_))));
    }

    #[test]
    fn dropout_modes() {
        let tape = Tape::new();
        let mut rng = SeedTree::new(1).rng();
        let x = tape.leaf(t(&[4], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(x.dropout(0.0, true, &mut rng).unwrap().value(), x.value());
        assert_eq!(x.dropout(0.7, false, &mut rng).unwrap().value(), x.value());
        assert!(matches!(x.dropout(1.0, true, &mut rng), Err(Error::Config(_))));
        assert!(matches!(x.dropout(-0.1, false, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn dropout_statistics() {
        let n = 100_000;
        let tape = Tape::new();
        let mut rng = SeedTree::new(42).rng();
        let x = tape.leaf(Tensor::full(&[n], 2.0));
        let y = x.dropout(0.5, true, &mut rng).unwrap().value();
        let zeros = y.data().iter().filter(|v| **v == 0.0).count() as f64 / n as f64;
        assert!((zeros - 0.5).abs() < 0.01, "zero fraction {zeros}");
        let mean = y.data().iter().sum::<f64>() / n as f64;
        assert!((mean - 2.0).abs() / 2.0 < 0.02, "mean {mean}");
    }

    #[test]
    fn backward_sum_and_square() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &[1.0, -2.0, 0.5, 3.0]));
        let g = tape.backward(x.sum()).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[1.0; 4]);

        let tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &[1.0, -2.0, 0.5, 3.0]));
        let loss = x.mul(x).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[2.0, -4.0, 1.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_inference() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[3]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
        let tape = Tape::inference();
        let x = tape.leaf(Tensor::ones(&[3]));
        assert!(matches!(tape.backward(x.sum()), Err(Error::Contract(_))));
    }

    #[test]
    fn unused_leaf_has_no_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[2]));
        let unused = tape.leaf(Tensor::ones(&[2]));
        let g = tape.backward(x.sum()).unwrap();
        assert!(g.wrt(unused).is_none());
    }

    #[test]
    fn bce_reference_points() {
        let tape = Tape::new();
        let p = tape.leaf(t(&[3], &[0.5, 0.5, 0.5]));
        let l = p.bce(&[0.0, 1.0, 1.0]).unwrap().value().item();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);

        let p = tape.leaf(t(&[2], &[1.0, 0.0]));
        let l = p.bce(&[1.0, 0.0]).unwrap().value().item();
        assert!(l >= 0.0 && l <= -(1.0 - BCE_EPS).ln() + 1e-18);
        assert!(p.bce(&[1.0]).is_err());
    }

    #[test]
    fn op_names_round_trip() {
        for kind in OpKind::ALL {
            assert_eq!(OpKind::from_name(kind.name()), Some(kind));
        }
    }
}
