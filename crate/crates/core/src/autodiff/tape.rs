//! Tape structure, operation set, and shape inference.

use std::sync::Arc;

use crate::tensor::Tensor;

/// Index of a node on a [`Tape`]. Only meaningful for the tape it came from.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// A recorded operation. Parents are stored inline; class-index lists are
/// shared because backward rules reuse them.
#[derive(Clone, Debug)]
pub enum Op {
    /// Input bound at evaluation time.
    Leaf,
    /// Value recorded on the tape itself.
    Const(Tensor),

    // elementwise, equal shapes
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    Relu(NodeId),
    /// `1[z > 0]`; derivative treated as zero.
    ReluMask(NodeId),
    /// `sigmoid(alpha * z)`.
    SigmoidSharp { z: NodeId, alpha: f64 },
    /// `alpha * sigmoid(z)`.
    SigmoidAmplified { z: NodeId, alpha: f64 },
    /// `log(1 + e^z)`.
    Softplus(NodeId),
    /// Elementwise `max(a, c)`.
    MaxScalar { a: NodeId, c: f64 },
    /// `1[a > c]`; derivative treated as zero.
    GtMask { a: NodeId, c: f64 },
    Clamp { a: NodeId, lo: f64, hi: f64 },
    /// `1[lo < a < hi]`; derivative treated as zero.
    InRangeMask { a: NodeId, lo: f64, hi: f64 },
    AddScalar { a: NodeId, c: f64 },
    Scale { a: NodeId, c: f64 },
    /// `|a|^p`.
    PowAbs { a: NodeId, p: f64 },
    /// `sign(a) * |a|^p`.
    SignedPowAbs { a: NodeId, p: f64 },

    // reductions and broadcasts
    /// Sum of all entries, scalar result.
    Sum(NodeId),
    /// Sum of elementwise products of two equal-shaped tensors, scalar result.
    Dot(NodeId, NodeId),
    /// Scalar node times tensor node.
    ScalarMul { s: NodeId, t: NodeId },
    /// Scalar node replicated to `shape`.
    BroadcastTo { s: NodeId, shape: Vec<usize> },
    Reshape { a: NodeId, shape: Vec<usize> },
    /// `[m, c] -> [m]`, summing each row.
    RowSum(NodeId),
    /// `[m] -> [m, cols]`, replicating each entry across its row.
    ColBroadcast { v: NodeId, cols: usize },

    /// `A' B'` with optional logical transposes, both rank 2.
    MatMul { a: NodeId, b: NodeId, ta: bool, tb: bool },

    // per-row class operations; `idx` holds one class index per row
    RowSelect { m: NodeId, idx: Arc<Vec<usize>> },
    /// `[m] -> [m, cols]` with `v[i]` placed at column `idx[i]`, zero elsewhere.
    RowScatter { v: NodeId, idx: Arc<Vec<usize>>, cols: usize },
    /// Per-row max over all columns except `idx[i]`; ties take the smallest
    /// column index.
    RowMaxExcluding { m: NodeId, idx: Arc<Vec<usize>> },
    /// One-hot of the argmax used by [`Op::RowMaxExcluding`]; derivative
    /// treated as zero, so second-order passes differentiate only through the
    /// selected branch.
    RowArgmaxExcludingMask { m: NodeId, idx: Arc<Vec<usize>> },
    RowLogSumExp(NodeId),
    RowSoftmax(NodeId),

    // batched 2-D convolution, stride 1, no padding
    /// `x: [n, ci, h, w]`, `w: [co, ci, kh, kw]` -> `[n, co, h-kh+1, w-kw+1]`.
    Conv { x: NodeId, w: NodeId },
    /// Adjoint of [`Op::Conv`] in the input slot: `g: [n, co, oh, ow]`,
    /// `w: [co, ci, kh, kw]` -> `[n, ci, oh+kh-1, ow+kw-1]`.
    ConvInputGrad { g: NodeId, w: NodeId },
    /// Adjoint of [`Op::Conv`] in the kernel slot, summed over the batch:
    /// `x: [n, ci, h, w]`, `g: [n, co, oh, ow]` -> `[co, ci, h-oh+1, w-ow+1]`.
    ConvKernelGrad { x: NodeId, g: NodeId },
}

impl Op {
    /// Visits parent node ids without allocating.
    pub fn visit_parents(&self, mut f: impl FnMut(NodeId)) {
        use Op::*;
        match self {
            Leaf | Const(_) => {}
            Neg(a) | Relu(a) | ReluMask(a) | Softplus(a) | Sum(a) | RowSum(a)
            | RowLogSumExp(a) | RowSoftmax(a) => f(*a),
            SigmoidSharp { z, .. } | SigmoidAmplified { z, .. } => f(*z),
            MaxScalar { a, .. }
            | GtMask { a, .. }
            | Clamp { a, .. }
            | InRangeMask { a, .. }
            | AddScalar { a, .. }
            | Scale { a, .. }
            | PowAbs { a, .. }
            | SignedPowAbs { a, .. }
            | Reshape { a, .. } => f(*a),
            BroadcastTo { s, .. } => f(*s),
            ColBroadcast { v, .. } => f(*v),
            RowSelect { m, .. } | RowMaxExcluding { m, .. } | RowArgmaxExcludingMask { m, .. } => {
                f(*m)
            }
            RowScatter { v, .. } => f(*v),
            Add(a, b) | Sub(a, b) | Mul(a, b) | Dot(a, b) => {
                f(*a);
                f(*b);
            }
            ScalarMul { s, t } => {
                f(*s);
                f(*t);
            }
            MatMul { a, b, .. } => {
                f(*a);
                f(*b);
            }
            Conv { x, w } => {
                f(*x);
                f(*w);
            }
            ConvInputGrad { g, w } => {
                f(*g);
                f(*w);
            }
            ConvKernelGrad { x, g } => {
                f(*x);
                f(*g);
            }
        }
    }
}

pub(crate) struct Node {
    pub op: Op,
    pub shape: Vec<usize>,
}

/// Recorded computation DAG. Parents always precede children, so a single
/// forward sweep in index order evaluates any subset of nodes.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
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

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.index()].shape
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.index()].op
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.index()].op, Op::Leaf)
    }

    pub fn contains(&self, id: NodeId) -> bool {
        id.index() < self.nodes.len()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        assert!(self.nodes.len() < u32::MAX as usize, "tape too large");
        self.nodes.push(Node { op, shape });
        NodeId((self.nodes.len() - 1) as u32)
    }

    fn shape_of(&self, id: NodeId) -> Vec<usize> {
        assert!(self.contains(id), "node {:?} not on this tape", id);
        self.nodes[id.index()].shape.clone()
    }

    fn same_shape(&self, a: NodeId, b: NodeId) -> Vec<usize> {
        let sa = self.shape_of(a);
        let sb = self.shape_of(b);
        assert_eq!(sa, sb, "operands must share a shape");
        sa
    }

    fn rows_cols(&self, id: NodeId) -> (usize, usize) {
        let s = self.shape_of(id);
        assert_eq!(s.len(), 2, "expected rank-2 node, got shape {:?}", s);
        (s[0], s[1])
    }

    // -- builders ---------------------------------------------------------

    pub fn leaf(&mut self, shape: impl Into<Vec<usize>>) -> NodeId {
        let shape = shape.into();
        self.push(Op::Leaf, shape)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Const(value), shape)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::scalar(value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let shape = self.same_shape(a, b);
        self.push(Op::Add(a, b), shape)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let shape = self.same_shape(a, b);
        self.push(Op::Sub(a, b), shape)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let shape = self.same_shape(a, b);
        self.push(Op::Mul(a, b), shape)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape_of(a);
        self.push(Op::Neg(a), shape)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape_of(a);
        self.push(Op::Relu(a), shape)
    }

    pub fn relu_mask(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape_of(a);
        self.push(Op::ReluMask(a), shape)
    }

    pub fn sigmoid_sharp(&mut self, z: NodeId, alpha: f64) -> NodeId {
        let shape = self.shape_of(z);
        self.push(Op::SigmoidSharp { z, alpha }, shape)
    }

    pub fn sigmoid_amplified(&mut self, z: NodeId, alpha: f64) -> NodeId {
        let shape = self.shape_of(z);
        self.push(Op::SigmoidAmplified { z, alpha }, shape)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape_of(a);
        self.push(Op::Softplus(a), shape)
    }

    pub fn max_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let shape = self.shape_of(a);
        self.push(Op::MaxScalar { a, c }, shape)
    }

    pub fn gt_mask(&mut self, a: NodeId, c: f64) -> NodeId {
        let shape = self.shape_of(a);
        self.push(Op::GtMask { a, c }, shape)
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        assert!(lo <= hi);
        let shape = self.shape_of(a);
        self.push(Op::Clamp { a, lo, hi }, shape)
    }

    pub fn in_range_mask(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        assert!(lo <= hi);
        let shape = self.shape_of(a);
        self.push(Op::InRangeMask { a, lo, hi }, shape)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let shape = self.shape_of(a);
        self.push(Op::AddScalar { a, c }, shape)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let shape = self.shape_of(a);
        self.push(Op::Scale { a, c }, shape)
    }

    pub fn pow_abs(&mut self, a: NodeId, p: f64) -> NodeId {
        assert!(p > 0.0);
        let shape = self.shape_of(a);
        self.push(Op::PowAbs { a, p }, shape)
    }

    pub fn signed_pow_abs(&mut self, a: NodeId, p: f64) -> NodeId {
        assert!(p > 0.0);
        let shape = self.shape_of(a);
        self.push(Op::SignedPowAbs { a, p }, shape)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        assert!(self.contains(a));
        self.push(Op::Sum(a), vec![])
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let sa = self.shape_of(a);
        let sb = self.shape_of(b);
        assert_eq!(sa, sb, "dot operands must share a shape");
        self.push(Op::Dot(a, b), vec![])
    }

    pub fn scalar_mul(&mut self, s: NodeId, t: NodeId) -> NodeId {
        assert!(self.shape_of(s).is_empty(), "scalar_mul multiplier must be scalar");
        let shape = self.shape_of(t);
        self.push(Op::ScalarMul { s, t }, shape)
    }

    pub fn broadcast_to(&mut self, s: NodeId, shape: impl Into<Vec<usize>>) -> NodeId {
        assert!(self.shape_of(s).is_empty(), "broadcast source must be scalar");
        let shape = shape.into();
        self.push(Op::BroadcastTo { s, shape: shape.clone() }, shape)
    }

    pub fn reshape(&mut self, a: NodeId, shape: impl Into<Vec<usize>>) -> NodeId {
        let shape = shape.into();
        let old = self.shape_of(a);
        assert_eq!(
            old.iter().product::<usize>(),
            shape.iter().product::<usize>(),
            "reshape must preserve the element count"
        );
        if old == shape {
            return a;
        }
        self.push(Op::Reshape { a, shape: shape.clone() }, shape)
    }

    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let (m, _c) = self.rows_cols(a);
        self.push(Op::RowSum(a), vec![m])
    }

    pub fn col_broadcast(&mut self, v: NodeId, cols: usize) -> NodeId {
        let s = self.shape_of(v);
        assert_eq!(s.len(), 1, "col_broadcast source must be rank 1");
        let m = s[0];
        self.push(Op::ColBroadcast { v, cols }, vec![m, cols])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> NodeId {
        let (ar, ac) = self.rows_cols(a);
        let (br, bc) = self.rows_cols(b);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (kb, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(k, kb, "matmul inner dimensions");
        self.push(Op::MatMul { a, b, ta, tb }, vec![m, n])
    }

    fn check_row_idx(&self, m: NodeId, idx: &[usize]) -> (usize, usize) {
        let (rows, cols) = self.rows_cols(m);
        assert_eq!(rows, idx.len(), "one class index per row required");
        assert!(idx.iter().all(|&j| j < cols), "class index out of range");
        (rows, cols)
    }

    pub fn row_select(&mut self, m: NodeId, idx: Arc<Vec<usize>>) -> NodeId {
        let (rows, _) = self.check_row_idx(m, &idx);
        self.push(Op::RowSelect { m, idx }, vec![rows])
    }

    pub fn row_scatter(&mut self, v: NodeId, idx: Arc<Vec<usize>>, cols: usize) -> NodeId {
        let s = self.shape_of(v);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0], idx.len());
        assert!(idx.iter().all(|&j| j < cols));
        let rows = s[0];
        self.push(Op::RowScatter { v, idx, cols }, vec![rows, cols])
    }

    pub fn row_max_excluding(&mut self, m: NodeId, idx: Arc<Vec<usize>>) -> NodeId {
        let (rows, cols) = self.check_row_idx(m, &idx);
        assert!(cols >= 2, "row_max_excluding needs at least two columns");
        self.push(Op::RowMaxExcluding { m, idx }, vec![rows])
    }

    pub fn row_argmax_excluding_mask(&mut self, m: NodeId, idx: Arc<Vec<usize>>) -> NodeId {
        let (rows, cols) = self.check_row_idx(m, &idx);
        assert!(cols >= 2);
        self.push(Op::RowArgmaxExcludingMask { m, idx }, vec![rows, cols])
    }

    pub fn row_logsumexp(&mut self, a: NodeId) -> NodeId {
        let (m, _) = self.rows_cols(a);
        self.push(Op::RowLogSumExp(a), vec![m])
    }

    pub fn row_softmax(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape_of(a);
        assert_eq!(shape.len(), 2);
        self.push(Op::RowSoftmax(a), shape)
    }

    fn dims4(&self, id: NodeId) -> [usize; 4] {
        let s = self.shape_of(id);
        assert_eq!(s.len(), 4, "expected rank-4 node, got shape {:?}", s);
        [s[0], s[1], s[2], s[3]]
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId) -> NodeId {
        let [n, ci, h, wd] = self.dims4(x);
        let [co, ci2, kh, kw] = self.dims4(w);
        assert_eq!(ci, ci2, "conv channel mismatch");
        assert!(kh <= h && kw <= wd, "conv kernel larger than input");
        self.push(Op::Conv { x, w }, vec![n, co, h - kh + 1, wd - kw + 1])
    }

    pub fn conv2d_input_grad(&mut self, g: NodeId, w: NodeId) -> NodeId {
        let [n, co, oh, ow] = self.dims4(g);
        let [co2, ci, kh, kw] = self.dims4(w);
        assert_eq!(co, co2, "conv output-channel mismatch");
        self.push(Op::ConvInputGrad { g, w }, vec![n, ci, oh + kh - 1, ow + kw - 1])
    }

    pub fn conv2d_kernel_grad(&mut self, x: NodeId, g: NodeId) -> NodeId {
        let [n, ci, h, wd] = self.dims4(x);
        let [n2, co, oh, ow] = self.dims4(g);
        assert_eq!(n, n2, "conv batch mismatch");
        assert!(oh <= h && ow <= wd);
        self.push(Op::ConvKernelGrad { x, g }, vec![co, ci, h - oh + 1, wd - ow + 1])
    }
}
