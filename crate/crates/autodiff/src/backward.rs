//! Reverse-mode differentiation over the tape.
//!
//! `Graph::grad` walks the tape from the output downward (ids are already in
//! topological order) and emits the vector-Jacobian products of every visited
//! op as ordinary nodes. The returned gradients are therefore differentiable
//! again, which is how second-order terms are obtained.

use crate::error::AdError;
use crate::graph::{Graph, NodeId, Op};
use crate::tensor::Tensor;

impl Graph {
    /// Gradients of a scalar `out` with respect to each node in `wrt`.
    ///
    /// Nodes unreachable from `out` get a zero tensor of their shape. Each
    /// node on the path is visited exactly once; accumulation order is fixed
    /// by node id, so results are deterministic.
    pub fn grad(&mut self, out: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>, AdError> {
        if self.value(out).len() != 1 {
            return Err(AdError::NonScalarOutput {
                shape: self.shape(out).to_vec(),
            });
        }
        self.bump_grad_passes();
        let limit = out.index() + 1;
        let mut adj: Vec<Option<NodeId>> = vec![None; limit];
        let seed = self.constant(Tensor::ones(self.shape(out)))?;
        adj[out.index()] = Some(seed);

        for id in (0..limit).rev() {
            let Some(gz) = adj[id] else { continue };
            if !self.requires_grad(NodeId(id)) {
                continue;
            }
            let op = self.node(NodeId(id)).op.clone();
            self.emit_vjps(NodeId(id), &op, gz, &mut adj)?;
        }

        wrt.iter()
            .map(|w| match adj.get(w.index()).copied().flatten() {
                Some(g) => Ok(g),
                None => self.zeros_like(*w),
            })
            .collect()
    }

    fn accumulate(
        &mut self,
        adj: &mut [Option<NodeId>],
        parent: NodeId,
        contrib: NodeId,
    ) -> Result<(), AdError> {
        if !self.requires_grad(parent) {
            return Ok(());
        }
        adj[parent.index()] = Some(match adj[parent.index()] {
            None => contrib,
            Some(prev) => self.add(prev, contrib)?,
        });
        Ok(())
    }

    fn emit_vjps(
        &mut self,
        node: NodeId,
        op: &Op,
        gz: NodeId,
        adj: &mut [Option<NodeId>],
    ) -> Result<(), AdError> {
        match *op {
            Op::Leaf | Op::StopGrad(_) | Op::MaxElem(..) => {}
            Op::Add(a, b) => {
                self.accumulate(adj, a, gz)?;
                self.accumulate(adj, b, gz)?;
            }
            Op::Sub(a, b) => {
                self.accumulate(adj, a, gz)?;
                let n = self.neg(gz)?;
                self.accumulate(adj, b, n)?;
            }
            Op::Mul(a, b) => {
                if self.requires_grad(a) {
                    let da = self.mul(gz, b)?;
                    self.accumulate(adj, a, da)?;
                }
                if self.requires_grad(b) {
                    let db = self.mul(gz, a)?;
                    self.accumulate(adj, b, db)?;
                }
            }
            Op::Neg(a) => {
                let d = self.neg(gz)?;
                self.accumulate(adj, a, d)?;
            }
            Op::Scale(a, c) => {
                let d = self.scale(gz, c)?;
                self.accumulate(adj, a, d)?;
            }
            Op::AddScalar(a, _) => {
                self.accumulate(adj, a, gz)?;
            }
            Op::Recip(a) => {
                // d/da (1/a) = -out^2
                let sq = self.mul(node, node)?;
                let m = self.mul(gz, sq)?;
                let d = self.neg(m)?;
                self.accumulate(adj, a, d)?;
            }
            Op::Sqrt(a) => {
                // d/da sqrt(a) = 1/(2 out)
                let r = self.recip(node)?;
                let m = self.mul(gz, r)?;
                let d = self.scale(m, 0.5)?;
                self.accumulate(adj, a, d)?;
            }
            Op::Exp(a) => {
                let d = self.mul(gz, node)?;
                self.accumulate(adj, a, d)?;
            }
            Op::Log(a) => {
                let r = self.recip(a)?;
                let d = self.mul(gz, r)?;
                self.accumulate(adj, a, d)?;
            }
            Op::Sigmoid(a) => {
                // s(1-s)
                let n = self.neg(node)?;
                let om = self.add_scalar(n, 1.0)?;
                let t = self.mul(node, om)?;
                let d = self.mul(gz, t)?;
                self.accumulate(adj, a, d)?;
            }
            Op::Softplus(a) => {
                let s = self.sigmoid(a)?;
                let d = self.mul(gz, s)?;
                self.accumulate(adj, a, d)?;
            }
            Op::Relu(a) => {
                // subgradient 0 at the kink
                let mask = self.value(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                let m = self.constant(mask)?;
                let d = self.mul(gz, m)?;
                self.accumulate(adj, a, d)?;
            }
            Op::Abs(a) => {
                let sgn = self.value(a).map(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                let m = self.constant(sgn)?;
                let d = self.mul(gz, m)?;
                self.accumulate(adj, a, d)?;
            }
            Op::Matmul(a, b) => {
                if self.requires_grad(a) {
                    let bt = self.transpose(b)?;
                    let da = self.matmul(gz, bt)?;
                    self.accumulate(adj, a, da)?;
                }
                if self.requires_grad(b) {
                    let at = self.transpose(a)?;
                    let db = self.matmul(at, gz)?;
                    self.accumulate(adj, b, db)?;
                }
            }
            Op::Transpose(a) => {
                let d = self.transpose(gz)?;
                self.accumulate(adj, a, d)?;
            }
            Op::Conv2d { x, k, pad } => {
                if self.requires_grad(x) {
                    let (h, w) = (self.shape(x)[2], self.shape(x)[3]);
                    let dx = self.conv2d_input_grad(gz, k, pad, h, w)?;
                    self.accumulate(adj, x, dx)?;
                }
                if self.requires_grad(k) {
                    let (kh, kw) = (self.shape(k)[2], self.shape(k)[3]);
                    let dk = self.conv2d_kernel_grad(x, gz, pad, kh, kw)?;
                    self.accumulate(adj, k, dk)?;
                }
            }
            Op::ConvInputGrad { dy, k, pad, .. } => {
                // node output has the conv input's shape; gz shares it
                if self.requires_grad(dy) {
                    let d = self.conv2d(gz, k, pad)?;
                    self.accumulate(adj, dy, d)?;
                }
                if self.requires_grad(k) {
                    let (kh, kw) = (self.shape(k)[2], self.shape(k)[3]);
                    let d = self.conv2d_kernel_grad(gz, dy, pad, kh, kw)?;
                    self.accumulate(adj, k, d)?;
                }
            }
            Op::ConvKernelGrad { x, dy, pad, .. } => {
                // node output has the kernel's shape; gz shares it
                if self.requires_grad(x) {
                    let (h, w) = (self.shape(x)[2], self.shape(x)[3]);
                    let d = self.conv2d_input_grad(dy, gz, pad, h, w)?;
                    self.accumulate(adj, x, d)?;
                }
                if self.requires_grad(dy) {
                    let d = self.conv2d(x, gz, pad)?;
                    self.accumulate(adj, dy, d)?;
                }
            }
            Op::SumAxes { x, ref axes } => {
                let mut keep = self.shape(x).to_vec();
                for &a in axes {
                    keep[a] = 1;
                }
                let full = self.shape(x).to_vec();
                let r = self.reshape(gz, &keep)?;
                let d = self.broadcast_to(r, &full)?;
                self.accumulate(adj, x, d)?;
            }
            Op::Broadcast { x } => {
                let to = self.shape(node).to_vec();
                let from = self.shape(x).to_vec();
                let offset = to.len() - from.len();
                let axes: Vec<usize> = (0..to.len())
                    .filter(|&i| i < offset || (from[i - offset] == 1 && to[i] > 1))
                    .collect();
                let s = self.sum_axes(gz, &axes)?;
                let d = self.reshape(s, &from)?;
                self.accumulate(adj, x, d)?;
            }
            Op::Reshape { x } => {
                let from = self.shape(x).to_vec();
                let d = self.reshape(gz, &from)?;
                self.accumulate(adj, x, d)?;
            }
            Op::Concat { ref parts, axis } => {
                let parts = parts.clone();
                let mut offset = 0usize;
                for p in parts {
                    let e = self.shape(p)[axis];
                    if self.requires_grad(p) {
                        let d = self.slice(gz, axis, offset, e)?;
                        self.accumulate(adj, p, d)?;
                    }
                    offset += e;
                }
            }
            Op::Slice {
                x,
                axis,
                start,
                len,
            } => {
                let full = self.shape(x).to_vec();
                let e = full[axis];
                let mut pieces = Vec::with_capacity(3);
                if start > 0 {
                    let mut s = full.clone();
                    s[axis] = start;
                    pieces.push(self.constant(Tensor::zeros(&s))?);
                }
                pieces.push(gz);
                if start + len < e {
                    let mut s = full.clone();
                    s[axis] = e - start - len;
                    pieces.push(self.constant(Tensor::zeros(&s))?);
                }
                let d = if pieces.len() == 1 {
                    pieces[0]
                } else {
                    self.concat(&pieces, axis)?
                };
                self.accumulate(adj, x, d)?;
            }
        }
        Ok(())
    }
}
