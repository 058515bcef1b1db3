//! Reverse-mode differentiation over whole-matrix primitives.
//!
//! Every primitive records its inputs and any constant side data
//! (index lists, fixed coefficients) on a [`Tape`]. [`Tape::backward`]
//! walks the recording in reverse and accumulates adjoints, returning a
//! gradient for every parameter leaf the loss depends on.

use std::sync::Arc;

use super::kernels::{self, Activation, LEAKY_SLOPE};
use super::{GradMap, Matrix, ParamStore};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Message weights for [`Tape::aggregate`].
#[derive(Clone, Debug)]
pub enum MessageWeights {
    /// Constant per-message coefficients (not differentiated).
    Fixed(Arc<[f64]>),
    /// A recorded `messages × 1` column.
    Learned(Var),
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param(String),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Act(Var, Activation),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Arc<[usize]>),
    SegmentSum(Var, Arc<[usize]>),
    SegmentSoftmax(Var, Arc<[usize]>),
    Aggregate {
        x: Var,
        weights: MessageWeights,
        src: Arc<[usize]>,
        offsets: Arc<[usize]>,
    },
    WeightedBce {
        logits: Var,
        labels: Arc<[f64]>,
        weights: Arc<[f64]>,
        probs: Vec<f64>,
        clipped: Vec<bool>,
    },
    SumAll(Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Lower/upper clip applied to probabilities before the log in the loss.
pub const PROB_CLIP: f64 = 1e-7;

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::shape(op, format!("{a:?} vs {b:?}"))
}

fn check_offsets(op: &'static str, offsets: &[usize], total: usize) -> Result<()> {
    if offsets.is_empty() || offsets[0] != 0 || *offsets.last().unwrap() != total {
        return Err(Error::shape(
            op,
            format!("offsets do not cover {total} rows"),
        ));
    }
    if offsets.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::shape(op, "offsets not monotone"));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Constant)
    }

    /// Records a parameter leaf holding a copy of `store[name]`.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let value = store.require(name)?.clone();
        Ok(self.push(value, Op::Param(name.to_string())))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `x + b` with the `1 × cols` row `b` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(shape_err("add_bias", xv.shape(), bv.shape()));
        }
        let mut out = xv.clone();
        kernels::add_row_bias(&mut out, bv.values());
        Ok(self.push(out, Op::AddBias(x, b)))
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scaled(c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn activate(&mut self, x: Var, kind: Activation) -> Var {
        let out = kernels::activate(self.value(x), kind);
        self.push(out, Op::Act(x, kind))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |&p| self.value(p).rows());
        let mut cols = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(shape_err("concat_cols", (rows, cols), v.shape()));
            }
            cols += v.cols();
        }
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut at = 0;
            for &p in parts {
                let src = self.nodes[p.0].value.row(r);
                out.row_mut(r)[at..at + src.len()].copy_from_slice(src);
                at += src.len();
            }
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map_or(0, |&p| self.value(p).cols());
        let mut values = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(shape_err("concat_rows", (rows, cols), v.shape()));
            }
            rows += v.rows();
            values.extend_from_slice(v.values());
        }
        let out = Matrix::from_vec(rows, cols, values)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn gather_rows(&mut self, x: Var, idx: Arc<[usize]>) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= xv.rows()) {
            return Err(Error::shape(
                "gather_rows",
                format!("row {bad} of {}", xv.rows()),
            ));
        }
        let out = xv.gather_rows(&idx);
        Ok(self.push(out, Op::GatherRows(x, idx)))
    }

    /// Sums consecutive row segments `offsets[s]..offsets[s+1]`.
    pub fn segment_sum(&mut self, x: Var, offsets: Arc<[usize]>) -> Result<Var> {
        let xv = self.value(x);
        check_offsets("segment_sum", &offsets, xv.rows())?;
        let mut out = Matrix::zeros(offsets.len() - 1, xv.cols());
        for s in 0..offsets.len() - 1 {
            let dst = out.row_mut(s);
            for r in offsets[s]..offsets[s + 1] {
                for (d, v) in dst.iter_mut().zip(xv.row(r)) {
                    *d += v;
                }
            }
        }
        Ok(self.push(out, Op::SegmentSum(x, offsets)))
    }

    /// Softmax of a column vector within each segment.
    pub fn segment_softmax(&mut self, x: Var, offsets: Arc<[usize]>) -> Result<Var> {
        let xv = self.value(x);
        if xv.cols() != 1 {
            return Err(Error::shape(
                "segment_softmax",
                format!("expected a column, got {:?}", xv.shape()),
            ));
        }
        check_offsets("segment_softmax", &offsets, xv.rows())?;
        let mut out = Matrix::zeros(xv.rows(), 1);
        for s in 0..offsets.len() - 1 {
            let (lo, hi) = (offsets[s], offsets[s + 1]);
            kernels::softmax_into(&xv.values()[lo..hi], &mut out.values_mut()[lo..hi]);
        }
        Ok(self.push(out, Op::SegmentSoftmax(x, offsets)))
    }

    /// Weighted gather-sum: `out[q] = Σ_{m in segment q} w_m · x[src_m]`.
    pub fn aggregate(
        &mut self,
        x: Var,
        weights: MessageWeights,
        src: Arc<[usize]>,
        offsets: Arc<[usize]>,
    ) -> Result<Var> {
        let xv = self.value(x);
        check_offsets("aggregate", &offsets, src.len())?;
        if let Some(&bad) = src.iter().find(|&&i| i >= xv.rows()) {
            return Err(Error::shape(
                "aggregate",
                format!("source row {bad} of {}", xv.rows()),
            ));
        }
        let w: &[f64] = match &weights {
            MessageWeights::Fixed(w) => w,
            MessageWeights::Learned(v) => {
                let wv = self.value(*v);
                if wv.shape() != (src.len(), 1) {
                    return Err(shape_err("aggregate", (src.len(), 1), wv.shape()));
                }
                wv.values()
            }
        };
        if w.len() != src.len() {
            return Err(shape_err("aggregate", (src.len(), 1), (w.len(), 1)));
        }
        let cols = xv.cols();
        let mut out = Matrix::zeros(offsets.len() - 1, cols);
        for q in 0..offsets.len() - 1 {
            let dst = out.row_mut(q);
            for m in offsets[q]..offsets[q + 1] {
                let wm = w[m];
                for (d, v) in dst.iter_mut().zip(xv.row(src[m])) {
                    *d += wm * v;
                }
            }
        }
        Ok(self.push(
            out,
            Op::Aggregate {
                x,
                weights,
                src,
                offsets,
            },
        ))
    }

    /// `−Σ w_i [y_i ln p_i + (1−y_i) ln(1−p_i)]` with `p = clip(sigmoid(logit))`.
    pub fn weighted_bce(
        &mut self,
        logits: Var,
        labels: Arc<[f64]>,
        weights: Arc<[f64]>,
    ) -> Result<Var> {
        let lv = self.value(logits);
        if lv.cols() != 1 || lv.rows() != labels.len() || labels.len() != weights.len() {
            return Err(Error::shape(
                "weighted_bce",
                format!(
                    "logits {:?}, {} labels, {} weights",
                    lv.shape(),
                    labels.len(),
                    weights.len()
                ),
            ));
        }
        let mut probs = Vec::with_capacity(labels.len());
        let mut clipped = Vec::with_capacity(labels.len());
        let mut loss = 0.0;
        for i in 0..labels.len() {
            let raw = kernels::sigmoid(lv.values()[i]);
            let p = raw.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
            clipped.push(p != raw);
            probs.push(p);
            let y = labels[i];
            loss -= weights[i] * (y * p.ln() + (1.0 - y) * (1.0 - p).ln());
        }
        Ok(self.push(
            Matrix::scalar(loss),
            Op::WeightedBce {
                logits,
                labels,
                weights,
                probs,
                clipped,
            },
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Matrix::scalar(s), Op::SumAll(x))
    }

    /// Reverse pass from a `1 × 1` loss. Returns gradients for every
    /// parameter leaf reached; unreached parameters are absent.
    pub fn backward(&self, loss: Var) -> Result<GradMap> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::shape(
                "backward",
                format!("loss has shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Matrix::scalar(1.0));
        let mut grads = GradMap::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Param(name) => match grads.get_mut(name) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        grads.insert(name.clone(), g);
                    }
                },
                Op::MatMul(a, b) => {
                    let da = g.matmul_bt(self.value(*b))?;
                    let db = self.value(*a).matmul_at(&g)?;
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *b, db);
                }
                Op::AddBias(x, b) => {
                    let mut db = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, v) in db.values_mut().iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    accumulate(&mut adj, *b, db);
                    accumulate(&mut adj, *x, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, g.clone());
                    accumulate(&mut adj, *b, g);
                }
                Op::Mul(a, b) => {
                    let da = g.hadamard(self.value(*b))?;
                    let db = g.hadamard(self.value(*a))?;
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *b, db);
                }
                Op::Scale(a, c) => accumulate(&mut adj, *a, g.scaled(*c)),
                Op::Act(x, kind) => {
                    let dx = activation_backward(*kind, self.value(*x), &node.value, &g);
                    accumulate(&mut adj, *x, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let mut dp = Matrix::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[at..at + w]);
                        }
                        at += w;
                        accumulate(&mut adj, p, dp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let (r, c) = self.value(p).shape();
                        let dp = Matrix::from_vec(r, c, g.values()[at * c..(at + r) * c].to_vec())?;
                        at += r;
                        accumulate(&mut adj, p, dp);
                    }
                }
                Op::GatherRows(x, idx) => {
                    let xv = self.value(*x);
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    for (r, &src) in idx.iter().enumerate() {
                        for (d, v) in dx.row_mut(src).iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    accumulate(&mut adj, *x, dx);
                }
                Op::SegmentSum(x, offsets) => {
                    let xv = self.value(*x);
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    for s in 0..offsets.len() - 1 {
                        for r in offsets[s]..offsets[s + 1] {
                            dx.row_mut(r).copy_from_slice(g.row(s));
                        }
                    }
                    accumulate(&mut adj, *x, dx);
                }
                Op::SegmentSoftmax(x, offsets) => {
                    let y = node.value.values();
                    let gv = g.values();
                    let mut dx = Matrix::zeros(y.len(), 1);
                    for s in 0..offsets.len() - 1 {
                        let (lo, hi) = (offsets[s], offsets[s + 1]);
                        let dot: f64 = (lo..hi).map(|m| gv[m] * y[m]).sum();
                        for m in lo..hi {
                            dx.values_mut()[m] = y[m] * (gv[m] - dot);
                        }
                    }
                    accumulate(&mut adj, *x, dx);
                }
                Op::Aggregate {
                    x,
                    weights,
                    src,
                    offsets,
                } => {
                    let xv = self.value(*x);
                    let w: &[f64] = match weights {
                        MessageWeights::Fixed(w) => w,
                        MessageWeights::Learned(v) => self.value(*v).values(),
                    };
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    let mut dw = matches!(weights, MessageWeights::Learned(_))
                        .then(|| Matrix::zeros(src.len(), 1));
                    for q in 0..offsets.len() - 1 {
                        let gq = g.row(q);
                        for m in offsets[q]..offsets[q + 1] {
                            let wm = w[m];
                            let s = src[m];
                            if let Some(dw) = dw.as_mut() {
                                dw.values_mut()[m] =
                                    gq.iter().zip(xv.row(s)).map(|(a, b)| a * b).sum();
                            }
                            for (d, v) in dx.row_mut(s).iter_mut().zip(gq) {
                                *d += wm * v;
                            }
                        }
                    }
                    accumulate(&mut adj, *x, dx);
                    if let (Some(dw), MessageWeights::Learned(v)) = (dw, weights) {
                        accumulate(&mut adj, *v, dw);
                    }
                }
                Op::WeightedBce {
                    logits,
                    labels,
                    weights,
                    probs,
                    clipped,
                } => {
                    let up = g.item();
                    let dl: Vec<f64> = (0..labels.len())
                        .map(|i| {
                            if clipped[i] {
                                0.0
                            } else {
                                up * weights[i] * (probs[i] - labels[i])
                            }
                        })
                        .collect();
                    accumulate(&mut adj, *logits, Matrix::column(&dl));
                }
                Op::SumAll(x) => {
                    let (r, c) = self.value(*x).shape();
                    accumulate(&mut adj, *x, Matrix::filled(r, c, g.item()));
                }
            }
        }

        for (name, g) in &grads {
            if !g.is_finite() {
                return Err(Error::Numeric(format!("gradient of {name}")));
            }
        }
        Ok(grads)
    }
}

fn accumulate(adj: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut adj[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn activation_backward(kind: Activation, x: &Matrix, y: &Matrix, g: &Matrix) -> Matrix {
    match kind {
        Activation::Identity => g.clone(),
        Activation::Sigmoid => {
            let mut out = g.clone();
            for (o, &yv) in out.values_mut().iter_mut().zip(y.values()) {
                *o *= yv * (1.0 - yv);
            }
            out
        }
        Activation::Relu => {
            let mut out = g.clone();
            for (o, &xv) in out.values_mut().iter_mut().zip(x.values()) {
                if xv <= 0.0 {
                    *o = 0.0;
                }
            }
            out
        }
        Activation::LeakyRelu => {
            let mut out = g.clone();
            for (o, &xv) in out.values_mut().iter_mut().zip(x.values()) {
                if xv <= 0.0 {
                    *o *= LEAKY_SLOPE;
                }
            }
            out
        }
        Activation::SoftmaxRows => {
            let mut out = Matrix::zeros(g.rows(), g.cols());
            for r in 0..g.rows() {
                let (yr, gr) = (y.row(r), g.row(r));
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for (o, (&yv, &gv)) in out.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                    *o = yv * (gv - dot);
                }
            }
            out
        }
    }
}
