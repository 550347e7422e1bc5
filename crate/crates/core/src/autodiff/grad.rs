//! The reverse-mode transform: appends a backward pass to the tape.

use super::tape::{NodeId, Op, Tape};
use super::BackwardMode;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

impl Tape {
    /// Appends the reverse pass for scalar `root` and returns one gradient
    /// node per `wrt` entry (a zero constant when `root` does not depend on
    /// it). The returned nodes are ordinary tape nodes, so `gradient` can be
    /// applied to (scalar functions of) its own output for second-order
    /// derivatives.
    ///
    /// `mode` selects the multiplier substituted for every ReLU encountered
    /// in *this* pass; masks recorded by an earlier pass keep the rule they
    /// were built with.
    pub fn gradient(
        &mut self,
        root: NodeId,
        wrt: &[NodeId],
        mode: BackwardMode,
    ) -> Result<Vec<NodeId>> {
        mode.validate()?;
        if !self.contains(root) {
            return Err(Error::UnknownNode(root.index()));
        }
        if !self.shape(root).is_empty() {
            return Err(Error::NonScalarRoot(self.shape(root).to_vec()));
        }
        for w in wrt {
            if !self.contains(*w) {
                return Err(Error::UnknownNode(w.index()));
            }
        }

        let root_i = root.index();
        let mut adj: Vec<Option<NodeId>> = vec![None; root_i + 1];
        adj[root_i] = Some(self.scalar(1.0));

        // Children always follow parents, so a descending sweep sees every
        // node's adjoint complete before propagating it.
        for i in (0..=root_i).rev() {
            let Some(g) = adj[i] else { continue };
            if matches!(
                self.op(NodeId(i as u32)),
                Op::Leaf
                    | Op::Const(_)
                    | Op::ReluMask(_)
                    | Op::GtMask { .. }
                    | Op::InRangeMask { .. }
                    | Op::RowArgmaxExcludingMask { .. }
            ) {
                continue;
            }
            let op = self.op(NodeId(i as u32)).clone();
            self.push_vjp(&op, NodeId(i as u32), g, mode, &mut adj);
        }

        Ok(wrt
            .iter()
            .map(|w| match adj.get(w.index()).copied().flatten() {
                Some(id) => id,
                None => {
                    let shape = self.shape(*w).to_vec();
                    self.constant(Tensor::zeros(shape))
                }
            })
            .collect())
    }

    fn accumulate(&mut self, adj: &mut [Option<NodeId>], parent: NodeId, contrib: NodeId) {
        let slot = &mut adj[parent.index()];
        *slot = Some(match *slot {
            Some(prev) => self.add(prev, contrib),
            None => contrib,
        });
    }

    /// Given the adjoint `g` of `node`, pushes each parent's contribution.
    fn push_vjp(
        &mut self,
        op: &Op,
        node: NodeId,
        g: NodeId,
        mode: BackwardMode,
        adj: &mut [Option<NodeId>],
    ) {
        use Op::*;
        match op {
            Leaf | Const(_) | ReluMask(_) | GtMask { .. } | InRangeMask { .. }
            | RowArgmaxExcludingMask { .. } => {}

            Add(a, b) => {
                self.accumulate(adj, *a, g);
                self.accumulate(adj, *b, g);
            }
            Sub(a, b) => {
                self.accumulate(adj, *a, g);
                let ng = self.neg(g);
                self.accumulate(adj, *b, ng);
            }
            Mul(a, b) => {
                let da = self.mul(g, *b);
                self.accumulate(adj, *a, da);
                let db = self.mul(g, *a);
                self.accumulate(adj, *b, db);
            }
            Neg(a) => {
                let d = self.neg(g);
                self.accumulate(adj, *a, d);
            }
            Relu(z) => {
                let mask = match mode {
                    BackwardMode::ExactRelu => self.relu_mask(*z),
                    BackwardMode::SmoothRelu { alpha } => self.sigmoid_sharp(*z, alpha),
                    BackwardMode::AmplifiedSigmoid { alpha } => self.sigmoid_amplified(*z, alpha),
                };
                let d = self.mul(g, mask);
                self.accumulate(adj, *z, d);
            }
            SigmoidSharp { z, alpha } => {
                // d/dz sigmoid(alpha z) = alpha * s * (1 - s), with s this node
                let ns = self.neg(node);
                let one_minus = self.add_scalar(ns, 1.0);
                let s_one_minus = self.mul(node, one_minus);
                let ds = self.scale(s_one_minus, *alpha);
                let d = self.mul(g, ds);
                self.accumulate(adj, *z, d);
            }
            SigmoidAmplified { z, alpha } => {
                // v = alpha * sigmoid(z); dv/dz = v * (1 - v / alpha)
                let scaled = self.scale(node, -1.0 / *alpha);
                let one_minus = self.add_scalar(scaled, 1.0);
                let dv = self.mul(node, one_minus);
                let d = self.mul(g, dv);
                self.accumulate(adj, *z, d);
            }
            Softplus(z) => {
                let s = self.sigmoid_sharp(*z, 1.0);
                let d = self.mul(g, s);
                self.accumulate(adj, *z, d);
            }
            MaxScalar { a, c } => {
                let mask = self.gt_mask(*a, *c);
                let d = self.mul(g, mask);
                self.accumulate(adj, *a, d);
            }
            Clamp { a, lo, hi } => {
                let mask = self.in_range_mask(*a, *lo, *hi);
                let d = self.mul(g, mask);
                self.accumulate(adj, *a, d);
            }
            AddScalar { a, .. } => self.accumulate(adj, *a, g),
            Scale { a, c } => {
                let d = self.scale(g, *c);
                self.accumulate(adj, *a, d);
            }
            PowAbs { a, p } => {
                // d/da |a|^p = p * sign(a) |a|^{p-1}
                let base = self.signed_pow_abs(*a, *p - 1.0);
                let scaled = self.scale(base, *p);
                let d = self.mul(g, scaled);
                self.accumulate(adj, *a, d);
            }
            SignedPowAbs { a, p } => {
                // d/da sign(a)|a|^p = p |a|^{p-1}
                let base = self.pow_abs(*a, *p - 1.0);
                let scaled = self.scale(base, *p);
                let d = self.mul(g, scaled);
                self.accumulate(adj, *a, d);
            }
            Sum(a) => {
                let shape = self.shape(*a).to_vec();
                let d = self.broadcast_to(g, shape);
                self.accumulate(adj, *a, d);
            }
            Dot(a, b) => {
                let da = self.scalar_mul(g, *b);
                self.accumulate(adj, *a, da);
                let db = self.scalar_mul(g, *a);
                self.accumulate(adj, *b, db);
            }
            ScalarMul { s, t } => {
                let ds = self.dot(g, *t);
                self.accumulate(adj, *s, ds);
                let dt = self.scalar_mul(*s, g);
                self.accumulate(adj, *t, dt);
            }
            BroadcastTo { s, .. } => {
                let d = self.sum(g);
                self.accumulate(adj, *s, d);
            }
            Reshape { a, .. } => {
                let shape = self.shape(*a).to_vec();
                let d = self.reshape(g, shape);
                self.accumulate(adj, *a, d);
            }
            RowSum(a) => {
                let cols = self.shape(*a)[1];
                let d = self.col_broadcast(g, cols);
                self.accumulate(adj, *a, d);
            }
            ColBroadcast { v, .. } => {
                let d = self.row_sum(g);
                self.accumulate(adj, *v, d);
            }
            MatMul { a, b, ta, tb } => {
                // C = A'B'. dA' = G B'ᵀ, dB' = A'ᵀ G, undoing the logical
                // transposes via the stored layouts.
                let da = if *ta {
                    self.matmul(*b, g, *tb, true)
                } else {
                    self.matmul(g, *b, false, !*tb)
                };
                self.accumulate(adj, *a, da);
                let db = if *tb {
                    self.matmul(g, *a, true, *ta)
                } else {
                    self.matmul(*a, g, !*ta, false)
                };
                self.accumulate(adj, *b, db);
            }
            RowSelect { m, idx } => {
                let cols = self.shape(*m)[1];
                let d = self.row_scatter(g, idx.clone(), cols);
                self.accumulate(adj, *m, d);
            }
            RowScatter { v, idx, .. } => {
                let d = self.row_select(g, idx.clone());
                self.accumulate(adj, *v, d);
            }
            RowMaxExcluding { m, idx } => {
                // Gradient flows only through the argmax branch.
                let cols = self.shape(*m)[1];
                let gb = self.col_broadcast(g, cols);
                let mask = self.row_argmax_excluding_mask(*m, idx.clone());
                let d = self.mul(gb, mask);
                self.accumulate(adj, *m, d);
            }
            RowLogSumExp(a) => {
                let cols = self.shape(*a)[1];
                let gb = self.col_broadcast(g, cols);
                let sm = self.row_softmax(*a);
                let d = self.mul(gb, sm);
                self.accumulate(adj, *a, d);
            }
            RowSoftmax(a) => {
                // dA = s ∘ (G - rowsum(G ∘ s) broadcast), with s this node
                let cols = self.shape(*a)[1];
                let gs = self.mul(g, node);
                let rs = self.row_sum(gs);
                let rb = self.col_broadcast(rs, cols);
                let centered = self.sub(g, rb);
                let d = self.mul(node, centered);
                self.accumulate(adj, *a, d);
            }
            Conv { x, w } => {
                let dx = self.conv2d_input_grad(g, *w);
                self.accumulate(adj, *x, dx);
                let dw = self.conv2d_kernel_grad(*x, g);
                self.accumulate(adj, *w, dw);
            }
            ConvInputGrad { g: gp, w } => {
                // input_grad is the adjoint of conv in the x slot; its own
                // adjoints fold back onto the same three-op family.
                let dg = self.conv2d(g, *w);
                self.accumulate(adj, *gp, dg);
                let dw = self.conv2d_kernel_grad(g, *gp);
                self.accumulate(adj, *w, dw);
            }
            ConvKernelGrad { x, g: gp } => {
                let dx = self.conv2d_input_grad(*gp, g);
                self.accumulate(adj, *x, dx);
                let dg = self.conv2d(*x, g);
                self.accumulate(adj, *gp, dg);
            }
        }
    }
}
