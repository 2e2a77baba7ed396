//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends a node holding its forward value; `backward` walks the
//! tape from the loss to the leaves. Nodes are only ever appended, so the
//! tape is in topological order by construction.

use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use super::tensor::{gemm, Tensor2};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: usize,
}

/// One query's slice of a score column for [`Tape::listwise_nll`].
#[derive(Debug, Clone, PartialEq)]
pub struct ListGroup {
    /// First row of this group's candidates in the score column.
    pub start: usize,
    pub len: usize,
    /// `(offset within group, weight)` for each positive.
    pub positives: Vec<(usize, f64)>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Mask(Var, Arc<Vec<f64>>),
    MeanRows(Var, Arc<Vec<Vec<usize>>>),
    L2Normalize(Var, Vec<f64>),
    GatherRows(Var, Vec<usize>),
    PairDots(Var, Vec<(usize, usize)>),
    Sum(Var),
    SoftmaxXent {
        logits: Var,
        probs: Tensor2,
        targets: Vec<usize>,
    },
    ListwiseNll {
        scores: Var,
        groups: Vec<ListGroup>,
        tau: f64,
        probs: Vec<f64>,
        total_weight: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor2,
    op: Op,
}

#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one scalar with respect to every node on the tape.
#[derive(Debug)]
pub struct Gradients {
    tape: u32,
    grads: Vec<Option<Tensor2>>,
}

impl Gradients {
    /// Gradient for `v`; `None` when `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor2> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(Option::as_ref)
    }
}

/// `log sum_j exp(scale * v_j)` split as `(max, ln_1p(rest))`. The largest
/// term contributes exactly 1 after max-subtraction; keeping the two parts
/// apart lets callers subtract a logit from `max` before adding the tail.
fn log_sum_exp(values: &[f64], scale: f64) -> (f64, f64) {
    let (arg, max) = values
        .iter()
        .map(|v| v * scale)
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
    let rest: f64 = values
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != arg)
        .map(|(_, v)| (v * scale - max).exp())
        .sum();
    (max, rest.ln_1p())
}

fn accumulate(slot: &mut Option<Tensor2>, g: Tensor2) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::InvalidArgument("variable does not belong to this tape".into()));
        }
        Ok(())
    }

    fn push(&mut self, op_name: &'static str, value: Tensor2, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        })
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.idx].value
    }

    pub fn leaf(&mut self, value: Tensor2) -> Result<Var> {
        self.push("leaf", value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = self.value(a).matmul(self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b))
    }

    /// Adds a `1 x cols` bias row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.check(x)?;
        self.check(bias)?;
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + {:?}", xv.shape(), bv.shape()),
            ));
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        self.push("add_bias", out, Op::AddBias(x, bias))
    }

    /// `x W + b` with `b` broadcast per row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("add", format!("{:?} + {:?}", av.shape(), bv.shape())));
        }
        let mut out = av.clone();
        out.add_assign(bv);
        self.push("add", out, Op::Add(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.check(x)?;
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= c);
        self.push("scale", out, Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        self.push("relu", out, Op::Relu(x))
    }

    /// Elementwise product with a constant mask (inverted dropout).
    pub fn mask(&mut self, x: Var, mask: Arc<Vec<f64>>) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        if mask.len() != xv.data().len() {
            return Err(Error::shape("mask", format!("{} vs {}", mask.len(), xv.data().len())));
        }
        let mut out = xv.clone();
        for (o, m) in out.data_mut().iter_mut().zip(mask.iter()) {
            *o *= m;
        }
        self.push("mask", out, Op::Mask(x, mask))
    }

    /// Row `g` of the output is the mean of `x`'s rows listed in `groups[g]`;
    /// an empty group yields a zero row.
    pub fn mean_rows(&mut self, x: Var, groups: Arc<Vec<Vec<usize>>>) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        let mut out = Tensor2::zeros(groups.len(), xv.cols());
        for (g, members) in groups.iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            let row = out.row_mut(g);
            for &i in members {
                if i >= xv.rows() {
                    return Err(Error::IndexOutOfRange {
                        index: i,
                        len: xv.rows(),
                    });
                }
                for (o, v) in row.iter_mut().zip(xv.row(i)) {
                    *o += v;
                }
            }
            let inv = 1.0 / members.len() as f64;
            row.iter_mut().for_each(|v| *v *= inv);
        }
        self.push("mean_rows", out, Op::MeanRows(x, groups))
    }

    /// Divides each row by its Euclidean norm; zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(out.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
            norms.push(n);
        }
        self.push("l2_normalize_rows", out, Op::L2Normalize(x, norms))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        let mut out = Tensor2::zeros(idx.len(), xv.cols());
        for (r, &i) in idx.iter().enumerate() {
            if i >= xv.rows() {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    len: xv.rows(),
                });
            }
            out.row_mut(r).copy_from_slice(xv.row(i));
        }
        self.push("gather_rows", out, Op::GatherRows(x, idx.to_vec()))
    }

    /// Column of row dot products `x[a] . x[b]` for each pair.
    pub fn pair_dots(&mut self, x: Var, pairs: &[(usize, usize)]) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        let mut out = Tensor2::zeros(pairs.len(), 1);
        for (r, &(a, b)) in pairs.iter().enumerate() {
            for i in [a, b] {
                if i >= xv.rows() {
                    return Err(Error::IndexOutOfRange {
                        index: i,
                        len: xv.rows(),
                    });
                }
            }
            let d: f64 = xv.row(a).iter().zip(xv.row(b)).map(|(p, q)| p * q).sum();
            out.set(r, 0, d);
        }
        self.push("pair_dots", out, Op::PairDots(x, pairs.to_vec()))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s: f64 = self.value(x).data().iter().sum();
        self.push("sum", Tensor2::scalar(s), Op::Sum(x))
    }

    /// Mean over rows of `-log softmax(logits)[target]`, with max-subtraction.
    pub fn softmax_xent(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.check(logits)?;
        let lv = self.value(logits);
        if targets.len() != lv.rows() {
            return Err(Error::shape(
                "softmax_xent",
                format!("{} targets for {} rows", targets.len(), lv.rows()),
            ));
        }
        if lv.rows() == 0 {
            return Err(Error::Empty("softmax_xent rows"));
        }
        let mut probs = Tensor2::zeros(lv.rows(), lv.cols());
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= lv.cols() {
                return Err(Error::InvalidArgument(format!(
                    "class index {t} out of range for {} classes",
                    lv.cols()
                )));
            }
            let row = lv.row(r);
            let (max, tail) = log_sum_exp(row, 1.0);
            let log_z = max + tail;
            total += (max - row[t]) + tail;
            for (p, v) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (v - log_z).exp();
            }
        }
        let loss = total / targets.len() as f64;
        self.push(
            "softmax_xent",
            Tensor2::scalar(loss),
            Op::SoftmaxXent {
                logits,
                probs,
                targets: targets.to_vec(),
            },
        )
    }

    /// Weighted listwise softmax NLL over a column of scores:
    /// `sum_q sum_{k in P_q} w_k * -log softmax(s_q / tau)_k`, divided by
    /// the total positive weight.
    pub fn listwise_nll(&mut self, scores: Var, groups: &[ListGroup], tau: f64) -> Result<Var> {
        self.check(scores)?;
        if tau.is_nan() || tau <= 0.0 {
            return Err(Error::InvalidArgument(format!("temperature must be > 0, got {tau}")));
        }
        let sv = self.value(scores);
        if sv.cols() != 1 {
            return Err(Error::shape("listwise_nll", format!("scores {:?}", sv.shape())));
        }
        let s = sv.data();
        let mut probs = vec![0.0; s.len()];
        let mut total = 0.0;
        let mut total_weight = 0.0;
        for g in groups {
            if g.len == 0 || g.start + g.len > s.len() {
                return Err(Error::shape(
                    "listwise_nll",
                    format!("group {}..{} over {} scores", g.start, g.start + g.len, s.len()),
                ));
            }
            let slice = &s[g.start..g.start + g.len];
            let scale = 1.0 / tau;
            let (max, tail) = log_sum_exp(slice, scale);
            let log_z = max + tail;
            for (j, v) in slice.iter().enumerate() {
                probs[g.start + j] = (v * scale - log_z).exp();
            }
            for &(k, w) in &g.positives {
                if k >= g.len {
                    return Err(Error::IndexOutOfRange { index: k, len: g.len });
                }
                total += w * ((max - slice[k] * scale) + tail);
                total_weight += w;
            }
        }
        if total_weight <= 0.0 {
            return Err(Error::Empty("listwise_nll positives"));
        }
        self.push(
            "listwise_nll",
            Tensor2::scalar(total / total_weight),
            Op::ListwiseNll {
                scores,
                groups: groups.to_vec(),
                tau,
                probs,
                total_weight,
            },
        )
    }

    /// Reverse pass seeded with d(loss)/d(loss) = 1.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::shape("backward", "loss must be a 1x1 scalar"));
        }
        let mut grads: Vec<Option<Tensor2>> = (0..=loss.idx).map(|_| None).collect();
        grads[loss.idx] = Some(Tensor2::scalar(1.0));

        for idx in (0..=loss.idx).rev() {
            let Some(dout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(dout);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut da = Tensor2::zeros(av.rows(), av.cols());
                    gemm(&dout, false, bv, true, &mut da, 0.0);
                    let mut db = Tensor2::zeros(bv.rows(), bv.cols());
                    gemm(av, true, &dout, false, &mut db, 0.0);
                    accumulate(&mut grads[a.idx], da);
                    accumulate(&mut grads[b.idx], db);
                }
                Op::AddBias(x, b) => {
                    let mut db = Tensor2::zeros(1, dout.cols());
                    for r in 0..dout.rows() {
                        for (d, g) in db.data_mut().iter_mut().zip(dout.row(r)) {
                            *d += g;
                        }
                    }
                    accumulate(&mut grads[b.idx], db);
                    accumulate(&mut grads[x.idx], dout);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[b.idx], dout.clone());
                    accumulate(&mut grads[a.idx], dout);
                }
                Op::Scale(x, c) => {
                    let mut g = dout;
                    g.data_mut().iter_mut().for_each(|v| *v *= c);
                    accumulate(&mut grads[x.idx], g);
                }
                Op::Relu(x) => {
                    let mut g = dout;
                    for (d, y) in g.data_mut().iter_mut().zip(node.value.data()) {
                        if *y <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    accumulate(&mut grads[x.idx], g);
                }
                Op::Mask(x, mask) => {
                    let mut g = dout;
                    for (d, m) in g.data_mut().iter_mut().zip(mask.iter()) {
                        *d *= m;
                    }
                    accumulate(&mut grads[x.idx], g);
                }
                Op::MeanRows(x, groups) => {
                    let xv = self.value(*x);
                    let mut dx = Tensor2::zeros(xv.rows(), xv.cols());
                    for (g, members) in groups.iter().enumerate() {
                        if members.is_empty() {
                            continue;
                        }
                        let inv = 1.0 / members.len() as f64;
                        let drow = dout.row(g);
                        for &i in members {
                            for (d, v) in dx.row_mut(i).iter_mut().zip(drow) {
                                *d += v * inv;
                            }
                        }
                    }
                    accumulate(&mut grads[x.idx], dx);
                }
                Op::L2Normalize(x, norms) => {
                    let y = &node.value;
                    let mut dx = dout;
                    for (r, &n) in norms.iter().enumerate() {
                        let row = dx.row_mut(r);
                        if n == 0.0 {
                            row.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let yr = y.row(r);
                        let proj: f64 = yr.iter().zip(row.iter()).map(|(a, b)| a * b).sum();
                        for (d, yv) in row.iter_mut().zip(yr) {
                            *d = (*d - yv * proj) / n;
                        }
                    }
                    accumulate(&mut grads[x.idx], dx);
                }
                Op::GatherRows(x, idx_list) => {
                    let xv = self.value(*x);
                    let mut dx = Tensor2::zeros(xv.rows(), xv.cols());
                    for (r, &i) in idx_list.iter().enumerate() {
                        for (d, g) in dx.row_mut(i).iter_mut().zip(dout.row(r)) {
                            *d += g;
                        }
                    }
                    accumulate(&mut grads[x.idx], dx);
                }
                Op::PairDots(x, pairs) => {
                    let xv = self.value(*x);
                    let mut dx = Tensor2::zeros(xv.rows(), xv.cols());
                    for (r, &(a, b)) in pairs.iter().enumerate() {
                        let g = dout.get(r, 0);
                        if g == 0.0 {
                            continue;
                        }
                        for c in 0..xv.cols() {
                            let (va, vb) = (xv.get(a, c), xv.get(b, c));
                            dx.row_mut(a)[c] += g * vb;
                            dx.row_mut(b)[c] += g * va;
                        }
                    }
                    accumulate(&mut grads[x.idx], dx);
                }
                Op::Sum(x) => {
                    let xv = self.value(*x);
                    let g = dout.item();
                    let dx = Tensor2::from_vec(xv.rows(), xv.cols(), vec![g; xv.data().len()])?;
                    accumulate(&mut grads[x.idx], dx);
                }
                Op::SoftmaxXent {
                    logits,
                    probs,
                    targets,
                } => {
                    let scale = dout.item() / targets.len() as f64;
                    let mut dx = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        let row = dx.row_mut(r);
                        row[t] -= 1.0;
                        row.iter_mut().for_each(|v| *v *= scale);
                    }
                    accumulate(&mut grads[logits.idx], dx);
                }
                Op::ListwiseNll {
                    scores,
                    groups,
                    tau,
                    probs,
                    total_weight,
                } => {
                    let scale = dout.item() / (total_weight * tau);
                    let mut ds = Tensor2::zeros(probs.len(), 1);
                    for g in groups {
                        let w_sum: f64 = g.positives.iter().map(|p| p.1).sum();
                        let col = ds.data_mut();
                        for j in 0..g.len {
                            col[g.start + j] += scale * w_sum * probs[g.start + j];
                        }
                        for &(k, w) in &g.positives {
                            col[g.start + k] -= scale * w;
                        }
                    }
                    accumulate(&mut grads[scores.idx], ds);
                }
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }
}
