//! Tape evaluation: schedules, the evaluator, and per-operation kernels.

use super::tape::{Node, NodeId, Op, Tape};
use super::sigmoid;
use crate::error::{Error, Result};
use crate::tensor::{matmul_into, Tensor};

/// The subset of tape nodes needed to evaluate a fixed set of roots, in
/// index (= topological) order. Building the schedule once and reusing it
/// keeps per-iteration evaluation allocation-free.
#[derive(Clone, Debug)]
pub struct Schedule {
    order: Vec<u32>,
}

impl Tape {
    pub fn schedule(&self, roots: &[NodeId]) -> Schedule {
        let mut needed = vec![false; self.nodes.len()];
        let mut stack: Vec<u32> = Vec::new();
        for r in roots {
            assert!(self.contains(*r), "schedule root not on tape");
            if !needed[r.index()] {
                needed[r.index()] = true;
                stack.push(r.0);
            }
        }
        while let Some(i) = stack.pop() {
            self.nodes[i as usize].op.visit_parents(|p| {
                if !needed[p.index()] {
                    needed[p.index()] = true;
                    stack.push(p.0);
                }
            });
        }
        let order = (0..self.nodes.len() as u32).filter(|&i| needed[i as usize]).collect();
        Schedule { order }
    }

    /// One-shot evaluation of `roots` under `bindings`; returns the root
    /// values in order. Loops should build a [`Schedule`] and reuse an
    /// [`Evaluator`] instead.
    pub fn eval(&self, bindings: &[(NodeId, &Tensor)], roots: &[NodeId]) -> Result<Vec<Tensor>> {
        let sched = self.schedule(roots);
        let mut ev = Evaluator::new();
        ev.run(self, &sched, bindings)?;
        Ok(roots.iter().map(|r| ev.value(*r).clone()).collect())
    }
}

/// Reusable evaluation workspace. Values live in one slot per tape node and
/// are overwritten in place on the next run.
#[derive(Default)]
pub struct Evaluator {
    values: Vec<Tensor>,
    /// Constants are copied out of the tape once and then kept.
    const_ready: Vec<bool>,
}

impl Evaluator {
    pub fn new() -> Self {
        Evaluator::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.index()]
    }

    /// Replays `sched` against `bindings`. Deterministic: identical tape,
    /// bindings, and schedule produce bit-identical values.
    pub fn run(&mut self, tape: &Tape, sched: &Schedule, bindings: &[(NodeId, &Tensor)]) -> Result<()> {
        if self.values.len() < tape.nodes.len() {
            self.values.resize_with(tape.nodes.len(), Tensor::empty);
            self.const_ready.resize(tape.nodes.len(), false);
        }
        for &i in &sched.order {
            let i = i as usize;
            let (before, rest) = self.values.split_at_mut(i);
            let out = &mut rest[0];
            let node = &tape.nodes[i];
            match &node.op {
                Op::Leaf => {
                    let bound = bindings.iter().find(|(id, _)| id.index() == i);
                    match bound {
                        Some((_, t)) => {
                            if t.shape() != node.shape.as_slice() {
                                return Err(Error::ShapeMismatch(format!(
                                    "leaf {} expects shape {:?}, binding has {:?}",
                                    i,
                                    node.shape,
                                    t.shape()
                                )));
                            }
                            out.reset(&node.shape);
                            out.data_mut().copy_from_slice(t.data());
                        }
                        None => return Err(Error::UnboundLeaf(i)),
                    }
                }
                Op::Const(v) => {
                    if !self.const_ready[i] {
                        out.reset(&node.shape);
                        out.data_mut().copy_from_slice(v.data());
                        self.const_ready[i] = true;
                    }
                }
                op => eval_op(op, node, before, out),
            }
        }
        Ok(())
    }
}

fn eval_op(op: &Op, node: &Node, values: &[Tensor], out: &mut Tensor) {
    use Op::*;
    match op {
        Leaf | Const(_) => unreachable!("handled by the evaluator"),
        Add(a, b) => zip(out, &node.shape, &values[a.index()], &values[b.index()], |x, y| x + y),
        Sub(a, b) => zip(out, &node.shape, &values[a.index()], &values[b.index()], |x, y| x - y),
        Mul(a, b) => zip(out, &node.shape, &values[a.index()], &values[b.index()], |x, y| x * y),
        Neg(a) => unary(out, &node.shape, &values[a.index()], |x| -x),
        Relu(a) => unary(out, &node.shape, &values[a.index()], |x| x.max(0.0)),
        ReluMask(a) => unary(out, &node.shape, &values[a.index()], |x| (x > 0.0) as u8 as f64),
        SigmoidSharp { z, alpha } => {
            let alpha = *alpha;
            unary(out, &node.shape, &values[z.index()], |x| sigmoid(alpha * x))
        }
        SigmoidAmplified { z, alpha } => {
            let alpha = *alpha;
            unary(out, &node.shape, &values[z.index()], |x| alpha * sigmoid(x))
        }
        Softplus(a) => unary(out, &node.shape, &values[a.index()], |x| {
            if x > 0.0 {
                x + (-x).exp().ln_1p()
            } else {
                x.exp().ln_1p()
            }
        }),
        MaxScalar { a, c } => {
            let c = *c;
            unary(out, &node.shape, &values[a.index()], |x| x.max(c))
        }
        GtMask { a, c } => {
            let c = *c;
            unary(out, &node.shape, &values[a.index()], |x| (x > c) as u8 as f64)
        }
        Clamp { a, lo, hi } => {
            let (lo, hi) = (*lo, *hi);
            unary(out, &node.shape, &values[a.index()], |x| x.clamp(lo, hi))
        }
        InRangeMask { a, lo, hi } => {
            let (lo, hi) = (*lo, *hi);
            unary(out, &node.shape, &values[a.index()], |x| (x > lo && x < hi) as u8 as f64)
        }
        AddScalar { a, c } => {
            let c = *c;
            unary(out, &node.shape, &values[a.index()], |x| x + c)
        }
        Scale { a, c } => {
            let c = *c;
            unary(out, &node.shape, &values[a.index()], |x| c * x)
        }
        PowAbs { a, p } => {
            let p = *p;
            unary(out, &node.shape, &values[a.index()], |x| x.abs().powf(p))
        }
        SignedPowAbs { a, p } => {
            let p = *p;
            unary(out, &node.shape, &values[a.index()], |x| x.signum() * x.abs().powf(p))
        }
        Sum(a) => {
            let mut acc = 0.0;
            for v in values[a.index()].iter() {
                acc += v;
            }
            out.reset(&[]);
            out.data_mut()[0] = acc;
        }
        Dot(a, b) => {
            out.reset(&[]);
            out.data_mut()[0] = values[a.index()].dot(&values[b.index()]);
        }
        ScalarMul { s, t } => {
            let c = values[s.index()].item();
            unary(out, &node.shape, &values[t.index()], |x| c * x)
        }
        BroadcastTo { s, shape } => {
            let c = values[s.index()].item();
            out.reset(shape);
            out.data_mut().fill(c);
        }
        Reshape { a, shape } => {
            out.reset(shape);
            out.data_mut().copy_from_slice(values[a.index()].data());
        }
        RowSum(a) => {
            let m = &values[a.index()];
            let (rows, cols) = m.dims2();
            out.reset(&[rows]);
            let src = m.data();
            for (i, dst) in out.data_mut().iter_mut().enumerate() {
                let mut acc = 0.0;
                for v in &src[i * cols..(i + 1) * cols] {
                    acc += v;
                }
                *dst = acc;
            }
        }
        ColBroadcast { v, cols } => {
            let src = &values[v.index()];
            let rows = src.len();
            out.reset(&[rows, *cols]);
            let dst = out.data_mut();
            for i in 0..rows {
                dst[i * cols..(i + 1) * cols].fill(src.data()[i]);
            }
        }
        MatMul { a, b, ta, tb } => {
            matmul_into(out, &values[a.index()], &values[b.index()], *ta, *tb);
        }
        RowSelect { m, idx } => {
            let src = &values[m.index()];
            let (rows, cols) = src.dims2();
            out.reset(&[rows]);
            for i in 0..rows {
                out.data_mut()[i] = src.data()[i * cols + idx[i]];
            }
        }
        RowScatter { v, idx, cols } => {
            let src = &values[v.index()];
            let rows = src.len();
            out.reset(&[rows, *cols]);
            out.data_mut().fill(0.0);
            for i in 0..rows {
                out.data_mut()[i * cols + idx[i]] = src.data()[i];
            }
        }
        RowMaxExcluding { m, idx } => {
            let src = &values[m.index()];
            let (rows, cols) = src.dims2();
            out.reset(&[rows]);
            for i in 0..rows {
                out.data_mut()[i] = row_max_excluding(&src.data()[i * cols..(i + 1) * cols], idx[i]).1;
            }
        }
        RowArgmaxExcludingMask { m, idx } => {
            let src = &values[m.index()];
            let (rows, cols) = src.dims2();
            out.reset(&[rows, cols]);
            out.data_mut().fill(0.0);
            for i in 0..rows {
                let (j, _) = row_max_excluding(&src.data()[i * cols..(i + 1) * cols], idx[i]);
                out.data_mut()[i * cols + j] = 1.0;
            }
        }
        RowLogSumExp(a) => {
            let src = &values[a.index()];
            let (rows, cols) = src.dims2();
            out.reset(&[rows]);
            for i in 0..rows {
                let row = &src.data()[i * cols..(i + 1) * cols];
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut acc = 0.0;
                for &v in row {
                    acc += (v - mx).exp();
                }
                out.data_mut()[i] = mx + acc.ln();
            }
        }
        RowSoftmax(a) => {
            let src = &values[a.index()];
            let (rows, cols) = src.dims2();
            out.reset(&[rows, cols]);
            for i in 0..rows {
                let row = &src.data()[i * cols..(i + 1) * cols];
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut acc = 0.0;
                for &v in row {
                    acc += (v - mx).exp();
                }
                for j in 0..cols {
                    out.data_mut()[i * cols + j] = (row[j] - mx).exp() / acc;
                }
            }
        }
        Conv { x, w } => conv_forward(&values[x.index()], &values[w.index()], out),
        ConvInputGrad { g, w } => conv_input_grad(&values[g.index()], &values[w.index()], out),
        ConvKernelGrad { x, g } => conv_kernel_grad(&values[x.index()], &values[g.index()], out),
    }
}

/// Argmax over `row` excluding column `skip`; ties take the smallest index.
fn row_max_excluding(row: &[f64], skip: usize) -> (usize, f64) {
    let mut best_j = usize::MAX;
    let mut best = f64::NEG_INFINITY;
    for (j, &v) in row.iter().enumerate() {
        if j != skip && v > best {
            best = v;
            best_j = j;
        }
    }
    (best_j, best)
}

fn unary(out: &mut Tensor, shape: &[usize], a: &Tensor, f: impl Fn(f64) -> f64) {
    out.reset(shape);
    for (dst, src) in out.data_mut().iter_mut().zip(a.iter()) {
        *dst = f(*src);
    }
}

fn zip(out: &mut Tensor, shape: &[usize], a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) {
    out.reset(shape);
    let bd = b.data();
    for (k, (dst, src)) in out.data_mut().iter_mut().zip(a.iter()).enumerate() {
        *dst = f(*src, bd[k]);
    }
}

fn dims4(t: &Tensor) -> [usize; 4] {
    let s = t.shape();
    [s[0], s[1], s[2], s[3]]
}

/// y[s,o,i,j] = sum_{c,a,b} x[s,c,i+a,j+b] * w[o,c,a,b]
fn conv_forward(x: &Tensor, w: &Tensor, out: &mut Tensor) {
    let [n, ci, h, wd] = dims4(x);
    let [co, _, kh, kw] = dims4(w);
    let (oh, ow) = (h - kh + 1, wd - kw + 1);
    out.reset(&[n, co, oh, ow]);
    let (xd, wdat) = (x.data(), w.data());
    let od = out.data_mut();
    od.fill(0.0);
    for s in 0..n {
        for o in 0..co {
            for c in 0..ci {
                let wbase = ((o * ci) + c) * kh * kw;
                for a in 0..kh {
                    for b in 0..kw {
                        let wv = wdat[wbase + a * kw + b];
                        if wv == 0.0 {
                            continue;
                        }
                        let xbase = ((s * ci + c) * h + a) * wd + b;
                        let obase = ((s * co + o) * oh) * ow;
                        for i in 0..oh {
                            let xrow = xbase + i * wd;
                            let orow = obase + i * ow;
                            for j in 0..ow {
                                od[orow + j] += wv * xd[xrow + j];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// dx[s,c,p,q] = sum_{o,a,b} g[s,o,p-a,q-b] * w[o,c,a,b]
fn conv_input_grad(g: &Tensor, w: &Tensor, out: &mut Tensor) {
    let [n, co, oh, ow] = dims4(g);
    let [_, ci, kh, kw] = dims4(w);
    let (h, wd) = (oh + kh - 1, ow + kw - 1);
    out.reset(&[n, ci, h, wd]);
    let (gd, wdat) = (g.data(), w.data());
    let od = out.data_mut();
    od.fill(0.0);
    for s in 0..n {
        for o in 0..co {
            for c in 0..ci {
                let wbase = ((o * ci) + c) * kh * kw;
                for a in 0..kh {
                    for b in 0..kw {
                        let wv = wdat[wbase + a * kw + b];
                        if wv == 0.0 {
                            continue;
                        }
                        let obase = ((s * ci + c) * h + a) * wd + b;
                        let gbase = ((s * co + o) * oh) * ow;
                        for i in 0..oh {
                            let orow = obase + i * wd;
                            let grow = gbase + i * ow;
                            for j in 0..ow {
                                od[orow + j] += wv * gd[grow + j];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// dw[o,c,a,b] = sum_{s,i,j} g[s,o,i,j] * x[s,c,i+a,j+b]
fn conv_kernel_grad(x: &Tensor, g: &Tensor, out: &mut Tensor) {
    let [n, ci, h, wd] = dims4(x);
    let [_, co, oh, ow] = dims4(g);
    let (kh, kw) = (h - oh + 1, wd - ow + 1);
    out.reset(&[co, ci, kh, kw]);
    let (xd, gd) = (x.data(), g.data());
    let od = out.data_mut();
    od.fill(0.0);
    for s in 0..n {
        for o in 0..co {
            for c in 0..ci {
                let obase = ((o * ci) + c) * kh * kw;
                for a in 0..kh {
                    for b in 0..kw {
                        let xbase = ((s * ci + c) * h + a) * wd + b;
                        let gbase = ((s * co + o) * oh) * ow;
                        let mut acc = 0.0;
                        for i in 0..oh {
                            let xrow = xbase + i * wd;
                            let grow = gbase + i * ow;
                            for j in 0..ow {
                                acc += gd[grow + j] * xd[xrow + j];
                            }
                        }
                        od[obase + a * kw + b] += acc;
                    }
                }
            }
        }
    }
}
