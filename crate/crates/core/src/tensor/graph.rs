//! Tape of tensor operations with reverse-mode differentiation.
//!
//! Nodes are appended in execution order, so the node list is already a
//! topological order: every input id is smaller than the id of its consumer.
//! `backward` walks the list once in reverse.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{GradMap, ModelParams};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(NodeId, NodeId),
    Conv2d {
        input: NodeId,
        weight: NodeId,
        padding: usize,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    ScalarMul {
        scalar: NodeId,
        x: NodeId,
    },
    AddBias {
        x: NodeId,
        bias: NodeId,
        axis: usize,
    },
    Concat {
        inputs: Vec<NodeId>,
        axis: usize,
    },
    Slice {
        x: NodeId,
        axis: usize,
        start: usize,
    },
    Reshape(NodeId),
    Transpose(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    },
    Softmax(NodeId),
    Gelu(NodeId),
    Sigmoid(NodeId),
    Mean(NodeId),
    Sum(NodeId),
    Abs(NodeId),
    ScalarFn {
        x: NodeId,
        grad: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::ScalarMul { .. } => "scalar_mul",
            Op::AddBias { .. } => "add_bias",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(_) => "reshape",
            Op::Transpose(_) => "transpose",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax(_) => "softmax",
            Op::Gelu(_) => "gelu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Mean(_) => "mean",
            Op::Sum(_) => "sum",
            Op::Abs(_) => "abs",
            Op::ScalarFn { .. } => "scalar_fn",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    /// Op-specific saved state: im2col columns for conv2d, normalized rows
    /// followed by per-row inverse std for layer norm.
    saved: Vec<f64>,
}

/// Computation graph for one forward/backward pass.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    node_grads: Vec<Option<Vec<f64>>>,
    params: GradMap,
}

impl Gradients {
    /// Gradient of the loss with respect to `id`, if the node requires grad
    /// and is reachable from the loss.
    pub fn wrt(&self, id: NodeId) -> Option<&[f64]> {
        self.node_grads.get(id.0)?.as_deref()
    }

    /// Accumulated gradients of every trainable parameter leaf.
    pub fn params(&self) -> &GradMap {
        &self.params
    }

    pub fn into_params(self) -> GradMap {
        self.params
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEF: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `out[m,n] += a[m,k] * b[k,n]`.
fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,k] += dy[m,n] * b[k,n]^T`.
fn matmul_acc_bt(dy: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dyrow = &dy[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let s: f64 = dyrow.iter().zip(brow).map(|(x, y)| x * y).sum();
            out[i * k + p] += s;
        }
    }
}

/// `out[k,n] += a[m,k]^T * dy[m,n]`.
fn matmul_acc_at(a: &[f64], dy: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dyrow = &dy[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, d) in orow.iter_mut().zip(dyrow) {
                *o += av * d;
            }
        }
    }
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols_n = g.ho * g.wo;
    let mut cols = vec![0.0; g.cin * g.k * g.k * cols_n];
    for c in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * cols_n..(row + 1) * cols_n];
                for oy in 0..g.ho {
                    let iy = oy + ky;
                    if iy < g.pad || iy >= g.h + g.pad {
                        continue;
                    }
                    let iy = iy - g.pad;
                    for ox in 0..g.wo {
                        let ix = ox + kx;
                        if ix < g.pad || ix >= g.w + g.pad {
                            continue;
                        }
                        dst[oy * g.wo + ox] = x[(c * g.h + iy) * g.w + ix - g.pad];
                    }
                }
            }
        }
    }
    cols
}

fn col2im_acc(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let cols_n = g.ho * g.wo;
    for c in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * cols_n..(row + 1) * cols_n];
                for oy in 0..g.ho {
                    let iy = oy + ky;
                    if iy < g.pad || iy >= g.h + g.pad {
                        continue;
                    }
                    let iy = iy - g.pad;
                    for ox in 0..g.wo {
                        let ix = ox + kx;
                        if ix < g.pad || ix >= g.w + g.pad {
                            continue;
                        }
                        dx[(c * g.h + iy) * g.w + ix - g.pad] += src[oy * g.wo + ox];
                    }
                }
            }
        }
    }
}

/// `(outer, axis_len, inner)` decomposition of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[NodeId], saved: Vec<f64>) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::Numerics {
                op: op.name().to_string(),
            });
        }
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            saved,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
            saved: Vec::new(),
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Copies parameter `name` into the graph. Frozen parameters are constants.
    pub fn param(&mut self, params: &ModelParams, name: &str) -> Result<NodeId> {
        let idx = params
            .index_of(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))?;
        let p = params.by_index(idx);
        self.nodes.push(Node {
            op: Op::Param(idx),
            value: p.value.clone(),
            requires_grad: !p.frozen,
            saved: Vec::new(),
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn same_shape(&self, a: NodeId, b: NodeId, op: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(format!("{op}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: NodeId, b: NodeId, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<NodeId> {
        self.same_shape(a, b, op.name())?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push(op, value, &[a, b], Vec::new())
    }

    fn unary_map(&mut self, x: NodeId, op: Op, f: impl Fn(f64) -> f64) -> Result<NodeId> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|v| f(*v)).collect();
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        self.push(op, value, &[x], Vec::new())
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul: {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let value = Tensor::new([m, n], out)?;
        self.push(Op::MatMul(a, b), value, &[a, b], Vec::new())
    }

    /// Stride-1 convolution with symmetric zero padding.
    /// Input `[cin, h, w]`, weight `[cout, cin, k, k]`, output `[cout, h', w']`.
    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, padding: usize) -> Result<NodeId> {
        let geom = self.conv_geom(input, weight, padding)?;
        let cols = im2col(self.value(input).data(), &geom);
        let kk = geom.cin * geom.k * geom.k;
        let n = geom.ho * geom.wo;
        let mut out = vec![0.0; geom.cout * n];
        matmul_acc(self.value(weight).data(), &cols, &mut out, geom.cout, kk, n);
        let value = Tensor::new([geom.cout, geom.ho, geom.wo], out)?;
        self.push(
            Op::Conv2d {
                input,
                weight,
                padding,
            },
            value,
            &[input, weight],
            cols,
        )
    }

    fn conv_geom(&self, input: NodeId, weight: NodeId, pad: usize) -> Result<ConvGeom> {
        let (si, sw) = (self.value(input).shape(), self.value(weight).shape());
        if si.len() != 3 || sw.len() != 4 || sw[1] != si[0] || sw[2] != sw[3] {
            return Err(Error::shape(format!("conv2d: input {si:?}, weight {sw:?}")));
        }
        let k = sw[2];
        if si[1] + 2 * pad < k || si[2] + 2 * pad < k {
            return Err(Error::shape(format!(
                "conv2d: kernel {k} larger than padded input {si:?} (pad {pad})"
            )));
        }
        Ok(ConvGeom {
            cin: si[0],
            h: si[1],
            w: si[2],
            cout: sw[0],
            k,
            pad,
            ho: si[1] + 2 * pad - k + 1,
            wo: si[2] + 2 * pad - k + 1,
        })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_map(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_map(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_map(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        self.unary_map(x, Op::Scale(x, factor), |v| v * factor)
    }

    /// `scalar * x` where `scalar` is a one-element node.
    pub fn scalar_mul(&mut self, scalar: NodeId, x: NodeId) -> Result<NodeId> {
        let s = self
            .value(scalar)
            .item()
            .ok_or_else(|| Error::shape("scalar_mul: scalar operand has more than one element"))?;
        let vx = self.value(x);
        let data = vx.data().iter().map(|v| s * v).collect();
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        self.push(Op::ScalarMul { scalar, x }, value, &[scalar, x], Vec::new())
    }

    /// Adds a 1-D `bias` broadcast along every axis of `x` except `axis`.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId, axis: usize) -> Result<NodeId> {
        let sx = self.value(x).shape().to_vec();
        let sb = self.value(bias).shape();
        if axis >= sx.len() || sb.len() != 1 || sb[0] != sx[axis] {
            return Err(Error::shape(format!(
                "add_bias: x {sx:?}, bias {sb:?}, axis {axis}"
            )));
        }
        let (outer, len, inner) = split_axis(&sx, axis);
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for o in 0..outer {
            for (a, bv) in b.iter().enumerate().take(len) {
                let base = (o * len + a) * inner;
                for v in &mut data[base..base + inner] {
                    *v += bv;
                }
            }
        }
        let value = Tensor::new(sx, data)?;
        self.push(Op::AddBias { x, bias, axis }, value, &[x, bias], Vec::new())
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat: no inputs"))?;
        let s0 = self.value(*first).shape().to_vec();
        if axis >= s0.len() {
            return Err(Error::shape(format!("concat: axis {axis} out of range for {s0:?}")));
        }
        let mut total = 0;
        for id in inputs {
            let s = self.value(*id).shape();
            let compatible = s.len() == s0.len()
                && s.iter()
                    .zip(&s0)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape(format!("concat: {s:?} vs {s0:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut shape = s0.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for id in inputs {
                let v = self.value(*id);
                let block = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
            }
        }
        let value = Tensor::new(shape, data)?;
        self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            value,
            inputs,
            Vec::new(),
        )
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let sx = self.value(x).shape().to_vec();
        if axis >= sx.len() || len == 0 || start + len > sx[axis] {
            return Err(Error::shape(format!(
                "slice: [{start}, {}) on axis {axis} of {sx:?}",
                start + len
            )));
        }
        let (outer, alen, inner) = split_axis(&sx, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * alen + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = sx;
        shape[axis] = len;
        let value = Tensor::new(shape, data)?;
        self.push(Op::Slice { x, axis, start }, value, &[x], Vec::new())
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(x).clone().reshaped(shape.to_vec())?;
        self.push(Op::Reshape(x), value, &[x], Vec::new())
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let sx = self.value(x).shape();
        if sx.len() != 2 {
            return Err(Error::shape(format!("transpose expects 2-D input, got {sx:?}")));
        }
        let (r, c) = (sx[0], sx[1]);
        let src = self.value(x).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new([c, r], data)?;
        self.push(Op::Transpose(x), value, &[x], Vec::new())
    }

    /// Normalizes over the last axis, then applies `gamma * x_hat + beta`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let sx = self.value(x).shape().to_vec();
        let d = *sx.last().expect("non-empty shape");
        for p in [gamma, beta] {
            if self.value(p).shape() != [d] {
                return Err(Error::shape(format!(
                    "layer_norm: affine parameter {:?} for rows of {d}",
                    self.value(p).shape()
                )));
            }
        }
        let rows = self.value(x).numel() / d;
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut saved = vec![0.0; rows * d + rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                let xh = (row[j] - mean) * rstd;
                saved[r * d + j] = xh;
                out[r * d + j] = g[j] * xh + b[j];
            }
            saved[rows * d + r] = rstd;
        }
        let value = Tensor::new(sx, out)?;
        self.push(Op::LayerNorm { x, gamma, beta }, value, &[x, gamma, beta], saved)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let sx = self.value(x).shape().to_vec();
        let d = *sx.last().expect("non-empty shape");
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for (row, orow) in src.chunks(d).zip(out.chunks_mut(d)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (o, v) in orow.iter_mut().zip(row) {
                *o = (v - max).exp();
                total += *o;
            }
            for o in orow.iter_mut() {
                *o /= total;
            }
        }
        let value = Tensor::new(sx, out)?;
        self.push(Op::Softmax(x), value, &[x], Vec::new())
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary_map(x, Op::Gelu(x), gelu)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary_map(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn abs(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary_map(x, Op::Abs(x), f64::abs)
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).data().iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(s), &[x], Vec::new())
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Op::Mean(x), Tensor::scalar(s), &[x], Vec::new())
    }

    /// Scalar node whose value and gradient with respect to `x` were computed
    /// outside the graph, e.g. a closed-form loss.
    pub fn scalar_fn(&mut self, x: NodeId, value: f64, grad: Vec<f64>) -> Result<NodeId> {
        if grad.len() != self.value(x).numel() {
            return Err(Error::shape(format!(
                "scalar_fn: gradient of length {} for input of {} elements",
                grad.len(),
                self.value(x).numel()
            )));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerics {
                op: "scalar_fn".into(),
            });
        }
        self.push(Op::ScalarFn { x, grad }, Tensor::scalar(value), &[x], Vec::new())
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut params: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else {
                continue;
            };
            self.backward_node(node, &dy, &mut grads, &mut params);
            grads[i] = Some(dy);
        }

        let mut map = GradMap::new();
        for (idx, g) in params {
            map.insert(idx, g);
        }
        Ok(Gradients {
            node_grads: grads,
            params: map,
        })
    }

    fn backward_node(
        &self,
        node: &Node,
        dy: &[f64],
        grads: &mut [Option<Vec<f64>>],
        params: &mut BTreeMap<usize, Vec<f64>>,
    ) {
        let nodes = &self.nodes;
        // Runs `f` on the gradient buffer of `id` when that node requires grad.
        let mut acc = |id: NodeId, f: &mut dyn FnMut(&mut [f64])| {
            let n = &nodes[id.0];
            if !n.requires_grad {
                return;
            }
            let buf = grads[id.0].get_or_insert_with(|| vec![0.0; n.value.numel()]);
            f(buf);
        };

        match &node.op {
            Op::Leaf => {}
            Op::Param(idx) => {
                let buf = params.entry(*idx).or_insert_with(|| vec![0.0; dy.len()]);
                for (b, d) in buf.iter_mut().zip(dy) {
                    *b += d;
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                acc(*a, &mut |g| matmul_acc_bt(dy, vb.data(), g, m, k, n));
                acc(*b, &mut |g| matmul_acc_at(va.data(), dy, g, m, k, n));
            }
            Op::Conv2d {
                input,
                weight,
                padding,
            } => {
                let geom = self
                    .conv_geom(*input, *weight, *padding)
                    .expect("validated in forward");
                let cols = &node.saved;
                let kk = geom.cin * geom.k * geom.k;
                let n = geom.ho * geom.wo;
                acc(*weight, &mut |g| matmul_acc_bt(dy, cols, g, geom.cout, kk, n));
                let wv = &nodes[weight.0].value;
                acc(*input, &mut |g| {
                    let mut dcols = vec![0.0; kk * n];
                    matmul_acc_at(wv.data(), dy, &mut dcols, geom.cout, kk, n);
                    col2im_acc(&dcols, &geom, g);
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
                acc(*b, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
                acc(*b, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g -= d));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |g| {
                    for ((g, d), y) in g.iter_mut().zip(dy).zip(vb) {
                        *g += d * y;
                    }
                });
                acc(*b, &mut |g| {
                    for ((g, d), x) in g.iter_mut().zip(dy).zip(va) {
                        *g += d * x;
                    }
                });
            }
            Op::Scale(x, f) => {
                acc(*x, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += f * d));
            }
            Op::ScalarMul { scalar, x } => {
                let s = nodes[scalar.0].value.data()[0];
                let vx = nodes[x.0].value.data();
                acc(*scalar, &mut |g| {
                    g[0] += dy.iter().zip(vx).map(|(d, v)| d * v).sum::<f64>();
                });
                acc(*x, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += s * d));
            }
            Op::AddBias { x, bias, axis } => {
                acc(*x, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                acc(*bias, &mut |g| {
                    for o in 0..outer {
                        for (a, gb) in g.iter_mut().enumerate().take(len) {
                            let base = (o * len + a) * inner;
                            *gb += dy[base..base + inner].iter().sum::<f64>();
                        }
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for id in inputs {
                    let len = nodes[id.0].value.shape()[*axis];
                    acc(*id, &mut |g| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            for (gv, d) in g[dst..dst + len * inner]
                                .iter_mut()
                                .zip(&dy[src..src + len * inner])
                            {
                                *gv += d;
                            }
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, alen, inner) = split_axis(nodes[x.0].value.shape(), *axis);
                let len = node.value.shape()[*axis];
                acc(*x, &mut |g| {
                    for o in 0..outer {
                        let dst = (o * alen + start) * inner;
                        let src = o * len * inner;
                        for (gv, d) in g[dst..dst + len * inner]
                            .iter_mut()
                            .zip(&dy[src..src + len * inner])
                        {
                            *gv += d;
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                acc(*x, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
            }
            Op::Transpose(x) => {
                let s = nodes[x.0].value.shape();
                let (r, c) = (s[0], s[1]);
                acc(*x, &mut |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[i * c + j] += dy[j * r + i];
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta } => {
                let d = *node.value.shape().last().expect("non-empty shape");
                let rows = node.value.numel() / d;
                let (xhat, rstd) = node.saved.split_at(rows * d);
                let gv = nodes[gamma.0].value.data();
                acc(*gamma, &mut |g| {
                    for r in 0..rows {
                        for j in 0..d {
                            g[j] += dy[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
                acc(*beta, &mut |g| {
                    for r in 0..rows {
                        for j in 0..d {
                            g[j] += dy[r * d + j];
                        }
                    }
                });
                acc(*x, &mut |g| {
                    let mut dxh = vec![0.0; d];
                    for r in 0..rows {
                        let xh = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxh[j] = dy[r * d + j] * gv[j];
                        }
                        let mean_dxh = dxh.iter().sum::<f64>() / d as f64;
                        let mean_dxh_xh =
                            dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            g[r * d + j] += rstd[r] * (dxh[j] - mean_dxh - xh[j] * mean_dxh_xh);
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let d = *node.value.shape().last().expect("non-empty shape");
                acc(*x, &mut |g| {
                    for ((grow, yrow), dyrow) in g.chunks_mut(d).zip(y.chunks(d)).zip(dy.chunks(d)) {
                        let dot: f64 = yrow.iter().zip(dyrow).map(|(a, b)| a * b).sum();
                        for ((gv, yv), dv) in grow.iter_mut().zip(yrow).zip(dyrow) {
                            *gv += yv * (dv - dot);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let vx = nodes[x.0].value.data();
                acc(*x, &mut |g| {
                    for ((gv, d), v) in g.iter_mut().zip(dy).zip(vx) {
                        *gv += d * gelu_grad(*v);
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                acc(*x, &mut |g| {
                    for ((gv, d), s) in g.iter_mut().zip(dy).zip(y) {
                        *gv += d * s * (1.0 - s);
                    }
                });
            }
            Op::Mean(x) => {
                let n = nodes[x.0].value.numel() as f64;
                acc(*x, &mut |g| g.iter_mut().for_each(|gv| *gv += dy[0] / n));
            }
            Op::Sum(x) => {
                acc(*x, &mut |g| g.iter_mut().for_each(|gv| *gv += dy[0]));
            }
            Op::Abs(x) => {
                let vx = nodes[x.0].value.data();
                acc(*x, &mut |g| {
                    for ((gv, d), v) in g.iter_mut().zip(dy).zip(vx) {
                        let sign = if *v > 0.0 {
                            1.0
                        } else if *v < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        *gv += d * sign;
                    }
                });
            }
            Op::ScalarFn { x, grad } => {
                acc(*x, &mut |g| {
                    for (gv, lg) in g.iter_mut().zip(grad) {
                        *gv += dy[0] * lg;
                    }
                });
            }
        }
    }
}
