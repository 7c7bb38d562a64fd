//! Append-only computation tape.
//!
//! Every operation runs eagerly and records itself as a node; node ids are
//! topologically ordered by construction, which makes reverse traversal a
//! single descending scan. Backward passes (see `backward.rs`) emit ordinary
//! nodes onto the same tape, so gradients are themselves differentiable.

use crate::conv;
use crate::error::AdError;
use crate::tensor::{strides_of, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    StopGrad(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    Recip(NodeId),
    Sqrt(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Relu(NodeId),
    Abs(NodeId),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Conv2d {
        x: NodeId,
        k: NodeId,
        pad: usize,
    },
    /// Adjoint of `Conv2d` w.r.t. its input; `h`/`w` are the input's spatial dims.
    ConvInputGrad {
        dy: NodeId,
        k: NodeId,
        pad: usize,
        h: usize,
        w: usize,
    },
    /// Adjoint of `Conv2d` w.r.t. its kernel; `kh`/`kw` are the kernel's spatial dims.
    ConvKernelGrad {
        x: NodeId,
        dy: NodeId,
        pad: usize,
        kh: usize,
        kw: usize,
    },
    SumAxes {
        x: NodeId,
        axes: Vec<usize>,
    },
    Broadcast {
        x: NodeId,
    },
    Reshape {
        x: NodeId,
    },
    Concat {
        parts: Vec<NodeId>,
        axis: usize,
    },
    Slice {
        x: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    },
    /// Elementwise max; evaluation-only (rejected on differentiable inputs).
    MaxElem(NodeId, NodeId),
}

impl Op {
    pub fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::StopGrad(a)
            | Op::Neg(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Recip(a)
            | Op::Sqrt(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sigmoid(a)
            | Op::Softplus(a)
            | Op::Relu(a)
            | Op::Abs(a)
            | Op::Transpose(a)
            | Op::SumAxes { x: a, .. }
            | Op::Broadcast { x: a }
            | Op::Reshape { x: a }
            | Op::Slice { x: a, .. } => vec![*a],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Matmul(a, b)
            | Op::MaxElem(a, b) => vec![*a, *b],
            Op::Conv2d { x, k, .. } => vec![*x, *k],
            Op::ConvInputGrad { dy, k, .. } => vec![*dy, *k],
            Op::ConvKernelGrad { x, dy, .. } => vec![*x, *dy],
            Op::Concat { parts, .. } => parts.clone(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::StopGrad(_) => "stop_grad",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Recip(_) => "recip",
            Op::Sqrt(_) => "sqrt",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softplus(_) => "softplus",
            Op::Relu(_) => "relu",
            Op::Abs(_) => "abs",
            Op::Matmul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvInputGrad { .. } => "conv2d_input_grad",
            Op::ConvKernelGrad { .. } => "conv2d_kernel_grad",
            Op::SumAxes { .. } => "sum_axes",
            Op::Broadcast { .. } => "broadcast",
            Op::Reshape { .. } => "reshape",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::MaxElem(..) => "max",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: Op,
    pub value: Tensor,
    pub requires_grad: bool,
}

/// Append-only tape of operation records.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    strict: bool,
    grad_passes: usize,
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            strict: true,
            grad_passes: 0,
        }
    }

    pub fn with_strict(strict: bool) -> Self {
        Self {
            nodes: Vec::new(),
            strict,
            grad_passes: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of backward passes recorded on this tape so far.
    pub fn grad_passes(&self) -> usize {
        self.grad_passes
    }

    pub(crate) fn bump_grad_passes(&mut self) {
        self.grad_passes += 1;
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    // ---- leaves ------------------------------------------------------

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<NodeId, AdError> {
        if self.strict && !value.is_finite() {
            return Err(AdError::NonFinite { op: "leaf" });
        }
        Ok(self.push(Op::Leaf, value, requires_grad))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<NodeId, AdError> {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, v: f64) -> Result<NodeId, AdError> {
        self.leaf(Tensor::scalar(v), false)
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op) -> Result<NodeId, AdError> {
        let value = eval_op(&op, &self.nodes)?;
        if self.strict && !value.is_finite() {
            return Err(AdError::NonFinite { op: op.name() });
        }
        let rg = op
            .parents()
            .iter()
            .any(|p| self.nodes[p.0].requires_grad)
            && !matches!(op, Op::StopGrad(_) | Op::MaxElem(..));
        Ok(self.push(op, value, rg))
    }

    // ---- elementwise and scalar ops ----------------------------------

    fn check_same_shape(
        &self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
    ) -> Result<(), AdError> {
        if self.shape(a) != self.shape(b) {
            return Err(AdError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        self.check_same_shape("add", a, b)?;
        self.record(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        self.check_same_shape("sub", a, b)?;
        self.record(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        self.check_same_shape("mul", a, b)?;
        self.record(Op::Mul(a, b))
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        self.record(Op::Neg(a))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, AdError> {
        self.record(Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId, AdError> {
        self.record(Op::AddScalar(a, c))
    }

    pub fn recip(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        self.record(Op::Recip(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        self.record(Op::Sqrt(a))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        self.record(Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        self.record(Op::Log(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        self.record(Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        self.record(Op::Softplus(a))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        self.record(Op::Relu(a))
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        self.record(Op::Abs(a))
    }

    pub fn stop_grad(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        self.record(Op::StopGrad(a))
    }

    /// Elementwise max. Evaluation-only: rejected if either input is
    /// differentiable, so it can never silently break a gradient path.
    pub fn max_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        self.check_same_shape("max", a, b)?;
        if self.requires_grad(a) || self.requires_grad(b) {
            return Err(AdError::NonDifferentiable { op: "max" });
        }
        self.record(Op::MaxElem(a, b))
    }

    // ---- linear algebra ----------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AdError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        self.record(Op::Matmul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        if self.shape(a).len() != 2 {
            return Err(AdError::InvalidArgument {
                op: "transpose",
                msg: format!("expected rank 2, got shape {:?}", self.shape(a)),
            });
        }
        self.record(Op::Transpose(a))
    }

    /// 2-D convolution, stride 1, symmetric zero padding `pad`.
    /// Input `[B,C,H,W]`, kernel `[O,C,KH,KW]`.
    pub fn conv2d(&mut self, x: NodeId, k: NodeId, pad: usize) -> Result<NodeId, AdError> {
        let (sx, sk) = (self.shape(x), self.shape(k));
        let ok = sx.len() == 4
            && sk.len() == 4
            && sx[1] == sk[1]
            && sx[2] + 2 * pad >= sk[2]
            && sx[3] + 2 * pad >= sk[3];
        if !ok {
            return Err(AdError::ShapeMismatch {
                op: "conv2d",
                lhs: sx.to_vec(),
                rhs: sk.to_vec(),
            });
        }
        self.record(Op::Conv2d { x, k, pad })
    }

    pub fn conv2d_input_grad(
        &mut self,
        dy: NodeId,
        k: NodeId,
        pad: usize,
        h: usize,
        w: usize,
    ) -> Result<NodeId, AdError> {
        let (sy, sk) = (self.shape(dy), self.shape(k));
        let ok = sy.len() == 4
            && sk.len() == 4
            && sy[1] == sk[0]
            && sy[2] == h + 2 * pad - sk[2] + 1
            && sy[3] == w + 2 * pad - sk[3] + 1;
        if !ok {
            return Err(AdError::ShapeMismatch {
                op: "conv2d_input_grad",
                lhs: sy.to_vec(),
                rhs: sk.to_vec(),
            });
        }
        self.record(Op::ConvInputGrad { dy, k, pad, h, w })
    }

    pub fn conv2d_kernel_grad(
        &mut self,
        x: NodeId,
        dy: NodeId,
        pad: usize,
        kh: usize,
        kw: usize,
    ) -> Result<NodeId, AdError> {
        let (sx, sy) = (self.shape(x), self.shape(dy));
        let ok = sx.len() == 4
            && sy.len() == 4
            && sx[0] == sy[0]
            && sy[2] == sx[2] + 2 * pad - kh + 1
            && sy[3] == sx[3] + 2 * pad - kw + 1;
        if !ok {
            return Err(AdError::ShapeMismatch {
                op: "conv2d_kernel_grad",
                lhs: sx.to_vec(),
                rhs: sy.to_vec(),
            });
        }
        self.record(Op::ConvKernelGrad { x, dy, pad, kh, kw })
    }

    // ---- shape ops ----------------------------------------------------

    /// Sum-reduce over `axes` (removed from the shape).
    pub fn sum_axes(&mut self, x: NodeId, axes: &[usize]) -> Result<NodeId, AdError> {
        let nd = self.shape(x).len();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if axes.iter().any(|&a| a >= nd) {
            return Err(AdError::InvalidArgument {
                op: "sum_axes",
                msg: format!("axes {axes:?} out of range for rank {nd}"),
            });
        }
        self.record(Op::SumAxes { x, axes })
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId, AdError> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.sum_axes(x, &axes)
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId, AdError> {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Broadcast to `shape` with numpy-style trailing alignment.
    pub fn broadcast_to(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, AdError> {
        if broadcast_plan(self.shape(x), shape).is_none() {
            return Err(AdError::ShapeMismatch {
                op: "broadcast",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let op = Op::Broadcast { x };
        let value = broadcast_eval(self.value(x), shape);
        if self.strict && !value.is_finite() {
            return Err(AdError::NonFinite { op: "broadcast" });
        }
        let rg = self.requires_grad(x);
        Ok(self.push(op, value, rg))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, AdError> {
        let value = self.value(x).clone().reshaped(shape)?;
        let rg = self.requires_grad(x);
        Ok(self.push(Op::Reshape { x }, value, rg))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId, AdError> {
        if parts.is_empty() {
            return Err(AdError::InvalidArgument {
                op: "concat",
                msg: "no parts".into(),
            });
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(AdError::InvalidArgument {
                op: "concat",
                msg: format!("axis {axis} out of range for rank {}", first.len()),
            });
        }
        for &p in &parts[1..] {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(first.iter())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(AdError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
        }
        self.record(Op::Concat {
            parts: parts.to_vec(),
            axis,
        })
    }

    pub fn slice(
        &mut self,
        x: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<NodeId, AdError> {
        let s = self.shape(x);
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(AdError::InvalidArgument {
                op: "slice",
                msg: format!("slice {start}..{} on axis {axis} of {s:?}", start + len),
            });
        }
        self.record(Op::Slice {
            x,
            axis,
            start,
            len,
        })
    }

    // ---- composites ----------------------------------------------------

    pub fn square(&mut self, x: NodeId) -> Result<NodeId, AdError> {
        self.mul(x, x)
    }

    /// Sigmoid-weighted linear unit: `x * sigmoid(x)`.
    pub fn silu(&mut self, x: NodeId) -> Result<NodeId, AdError> {
        let s = self.sigmoid(x)?;
        self.mul(x, s)
    }

    /// L2 norm over all entries.
    pub fn l2_norm(&mut self, x: NodeId) -> Result<NodeId, AdError> {
        let sq = self.square(x)?;
        let s = self.sum_all(sq)?;
        self.sqrt(s)
    }

    pub fn mean_axes(&mut self, x: NodeId, axes: &[usize]) -> Result<NodeId, AdError> {
        let n: usize = axes.iter().map(|&a| self.shape(x)[a]).product();
        let s = self.sum_axes(x, axes)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn zeros_like(&mut self, x: NodeId) -> Result<NodeId, AdError> {
        let t = Tensor::zeros(self.shape(x));
        self.constant(t)
    }

    /// Re-executes every recorded op and checks the stored forward values
    /// are reproduced bit-exactly. Returns the number of nodes replayed.
    pub fn replay_check(&self) -> Result<usize, AdError> {
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            // reshape/broadcast record their target shape on the node itself
            let v = match &node.op {
                Op::Reshape { x } => self.nodes[x.0]
                    .value
                    .clone()
                    .reshaped(node.value.shape())?,
                Op::Broadcast { x } => {
                    broadcast_eval(&self.nodes[x.0].value, node.value.shape())
                }
                _ => eval_op(&node.op, &self.nodes)?,
            };
            if v.shape() != node.value.shape() || v.data() != node.value.data() {
                return Err(AdError::InvalidArgument {
                    op: "replay",
                    msg: format!("node {i} ({}) not reproduced bit-exactly", node.op.name()),
                });
            }
        }
        Ok(self.nodes.len())
    }
}

// ---- forward evaluation ------------------------------------------------

fn ew2(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("shape checked")
}

pub(crate) fn eval_op(op: &Op, nodes: &[Node]) -> Result<Tensor, AdError> {
    let v = |id: &NodeId| &nodes[id.0].value;
    let out = match op {
        Op::Leaf => unreachable!("leaves are not re-evaluated"),
        Op::StopGrad(a) | Op::Reshape { x: a } => v(a).clone(),
        Op::Add(a, b) => ew2(v(a), v(b), |x, y| x + y),
        Op::Sub(a, b) => ew2(v(a), v(b), |x, y| x - y),
        Op::Mul(a, b) => ew2(v(a), v(b), |x, y| x * y),
        Op::MaxElem(a, b) => ew2(v(a), v(b), f64::max),
        Op::Neg(a) => v(a).map(|x| -x),
        Op::Scale(a, c) => v(a).map(|x| x * c),
        Op::AddScalar(a, c) => v(a).map(|x| x + c),
        Op::Recip(a) => v(a).map(|x| 1.0 / x),
        Op::Sqrt(a) => v(a).map(f64::sqrt),
        Op::Exp(a) => v(a).map(f64::exp),
        Op::Log(a) => v(a).map(f64::ln),
        Op::Sigmoid(a) => v(a).map(sigmoid),
        Op::Softplus(a) => v(a).map(softplus),
        Op::Relu(a) => v(a).map(|x| x.max(0.0)),
        Op::Abs(a) => v(a).map(f64::abs),
        Op::Matmul(a, b) => matmul_eval(v(a), v(b)),
        Op::Transpose(a) => transpose_eval(v(a)),
        Op::Conv2d { x, k, pad } => {
            let (xt, kt) = (v(x), v(k));
            let (sb, sc, sh, sw) = shape4(xt);
            let (so, _, skh, skw) = shape4(kt);
            let ho = sh + 2 * pad - skh + 1;
            let wo = sw + 2 * pad - skw + 1;
            let mut y = Tensor::zeros(&[sb, so, ho, wo]);
            conv::conv2d_forward(
                xt.data(),
                kt.data(),
                y.data_mut(),
                sb,
                sc,
                sh,
                sw,
                so,
                skh,
                skw,
                *pad,
            );
            y
        }
        Op::ConvInputGrad { dy, k, pad, h, w } => {
            let (yt, kt) = (v(dy), v(k));
            let (sb, so, _, _) = shape4(yt);
            let (_, sc, skh, skw) = shape4(kt);
            let mut dx = Tensor::zeros(&[sb, sc, *h, *w]);
            conv::conv2d_input_grad(
                yt.data(),
                kt.data(),
                dx.data_mut(),
                sb,
                sc,
                *h,
                *w,
                so,
                skh,
                skw,
                *pad,
            );
            dx
        }
        Op::ConvKernelGrad { x, dy, pad, kh, kw } => {
            let (xt, yt) = (v(x), v(dy));
            let (sb, sc, sh, sw) = shape4(xt);
            let (_, so, _, _) = shape4(yt);
            let mut dk = Tensor::zeros(&[so, sc, *kh, *kw]);
            conv::conv2d_kernel_grad(
                xt.data(),
                yt.data(),
                dk.data_mut(),
                sb,
                sc,
                sh,
                sw,
                so,
                *kh,
                *kw,
                *pad,
            );
            dk
        }
        Op::SumAxes { x, axes } => sum_axes_eval(v(x), axes),
        Op::Broadcast { .. } => {
            unreachable!("broadcast evaluated at record time")
        }
        Op::Concat { parts, axis } => {
            let tensors: Vec<&Tensor> = parts.iter().map(v).collect();
            concat_eval(&tensors, *axis)
        }
        Op::Slice {
            x,
            axis,
            start,
            len,
        } => slice_eval(v(x), *axis, *start, *len),
    };
    Ok(out)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + e^x)`.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn shape4(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2], s[3])
}

fn matmul_eval(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out).expect("shape checked")
}

fn transpose_eval(a: &Tensor) -> Tensor {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data()[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out).expect("shape checked")
}

fn sum_axes_eval(x: &Tensor, axes: &[usize]) -> Tensor {
    let shape = x.shape();
    let out_shape: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &e)| e)
        .collect();
    let out_strides = strides_of(&out_shape);
    // stride into the output for each input axis (0 when reduced)
    let mut axis_out_stride = vec![0usize; shape.len()];
    let mut kept = 0;
    for (i, st) in axis_out_stride.iter_mut().enumerate() {
        if !axes.contains(&i) {
            *st = out_strides[kept];
            kept += 1;
        }
    }
    let mut out = Tensor::zeros(&out_shape);
    let od = out.data_mut();
    let mut idx = vec![0usize; shape.len()];
    let mut oi = 0usize;
    for &val in x.data() {
        od[oi] += val;
        // advance the multi-index and the output offset together
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            oi += axis_out_stride[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
            oi -= axis_out_stride[ax] * shape[ax];
        }
    }
    out
}

/// Expansion plan: for each target axis, the input stride (0 where expanded).
pub(crate) fn broadcast_plan(from: &[usize], to: &[usize]) -> Option<Vec<usize>> {
    if from.len() > to.len() {
        return None;
    }
    let offset = to.len() - from.len();
    let from_strides = strides_of(from);
    let mut plan = vec![0usize; to.len()];
    for (i, &te) in to.iter().enumerate() {
        if i < offset {
            continue;
        }
        let fe = from[i - offset];
        if fe == te {
            plan[i] = from_strides[i - offset];
        } else if fe != 1 {
            return None;
        }
    }
    Some(plan)
}

pub(crate) fn broadcast_eval(x: &Tensor, to: &[usize]) -> Tensor {
    let plan = broadcast_plan(x.shape(), to).expect("plan checked");
    let mut out = Tensor::zeros(to);
    let od = out.data_mut();
    let xd = x.data();
    let mut idx = vec![0usize; to.len()];
    let mut xi = 0usize;
    for o in od.iter_mut() {
        *o = xd[xi];
        for ax in (0..to.len()).rev() {
            idx[ax] += 1;
            xi += plan[ax];
            if idx[ax] < to[ax] {
                break;
            }
            idx[ax] = 0;
            xi -= plan[ax] * to[ax];
        }
    }
    out
}

fn concat_eval(parts: &[&Tensor], axis: usize) -> Tensor {
    let first = parts[0].shape();
    let mut out_shape = first.to_vec();
    out_shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();
    let mut data = Vec::with_capacity(out_shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let e = p.shape()[axis];
            let chunk = &p.data()[o * e * inner..(o + 1) * e * inner];
            data.extend_from_slice(chunk);
        }
    }
    Tensor::new(out_shape, data).expect("shape computed")
}

fn slice_eval(x: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    let shape = x.shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let e = shape[axis];
    let mut out_shape = shape.to_vec();
    out_shape[axis] = len;
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * e + start) * inner;
        data.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    Tensor::new(out_shape, data).expect("shape computed")
}
