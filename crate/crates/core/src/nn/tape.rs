//! Reverse-mode automatic differentiation over dense matrices.

use std::sync::Arc;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

type Index = Arc<Vec<usize>>;

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MulScalar(Var, Var),
    LeakyRelu(Var, f64),
    LayerNorm(Var, Vec<f64>),
    Concat(Vec<Var>),
    Gather(Var, Index),
    SliceRows(Var, usize),
    SegmentSum(Var, Index),
    SegmentMean(Var, Index, Vec<usize>),
    SegmentMin(Var, Vec<usize>),
    SegmentLogSoftmax(Var, Index, Vec<f64>),
    RepeatRow(Var),
    Softplus(Var),
    Exp(Var),
    Square(Var),
    Min(Var, Var),
    Max(Var, Var),
    Clamp(Var, f64, f64),
    SumAll(Var),
    MeanAll(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    /// Whether any parameter feeds into this node.
    grad: bool,
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param(_) => Vec::new(),
            Op::MatMul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MulScalar(a, b)
            | Op::Min(a, b)
            | Op::Max(a, b) => vec![*a, *b],
            Op::Concat(parts) => parts.clone(),
            Op::Scale(a, _)
            | Op::AddConst(a)
            | Op::LeakyRelu(a, _)
            | Op::LayerNorm(a, _)
            | Op::Gather(a, _)
            | Op::SliceRows(a, _)
            | Op::SegmentSum(a, _)
            | Op::SegmentMean(a, _, _)
            | Op::SegmentMin(a, _)
            | Op::SegmentLogSoftmax(a, _, _)
            | Op::RepeatRow(a)
            | Op::Softplus(a)
            | Op::Exp(a)
            | Op::Square(a)
            | Op::Clamp(a, _, _)
            | Op::SumAll(a)
            | Op::MeanAll(a) => vec![*a],
        }
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Records a computation for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

/// Gradients for every parameter of a store, aligned with its ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients(pub Vec<Tensor>);

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Gradients(store.tensors().iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect())
    }

    pub fn flat(&self) -> Vec<f64> {
        self.0.iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().flat_map(|t| &t.data).map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.0 {
            for x in &mut t.data {
                *x *= factor;
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

fn segment_counts(seg: &[usize], n: usize) -> Vec<usize> {
    let mut counts = vec![0; n];
    for &s in seg {
        counts[s] += 1;
    }
    counts
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let grad = matches!(op, Op::Param(_)) || op.inputs().iter().any(|v| self.nodes[v.0].grad);
        self.nodes.push(Node { value, op, grad });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Parameter leaf; repeated requests for the same id share one node.
    pub fn param(&mut self, store: &ParamStore, id: usize) -> Var {
        if self.param_vars.len() <= id {
            self.param_vars.resize(id + 1, None);
        }
        if let Some(v) = self.param_vars[id] {
            return v;
        }
        let v = self.push(store.tensor(id).clone(), Op::Param(id));
        self.param_vars[id] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// Adds a `1×c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!((r.rows, r.cols), (1, x.cols), "add_row shape mismatch");
        let mut out = x.clone();
        for i in 0..out.rows {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r.data) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by a `1×c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!((r.rows, r.cols), (1, x.cols), "mul_row shape mismatch");
        let mut out = x.clone();
        for i in 0..out.rows {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r.data) {
                *o *= b;
            }
        }
        self.push(out, Op::MulRow(a, row))
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!((x.rows, x.cols), (y.rows, y.cols), "elementwise shape mismatch");
        Tensor {
            rows: x.rows,
            cols: x.cols,
            data: x.data.iter().zip(&y.data).map(|(p, q)| f(*p, *q)).collect(),
        }
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let x = self.value(a);
        Tensor { rows: x.rows, cols: x.cols, data: x.data.iter().map(|p| f(*p)).collect() }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, |p, q| p + q);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, |p, q| p - q);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, |p, q| p * q);
        self.push(v, Op::Mul(a, b))
    }

    pub fn min(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, f64::min);
        self.push(v, Op::Min(a, b))
    }

    pub fn max(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, f64::max);
        self.push(v, Op::Max(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.map(a, |p| p * k);
        self.push(v, Op::Scale(a, k))
    }

    pub fn add_const(&mut self, a: Var, k: f64) -> Var {
        let v = self.map(a, |p| p + k);
        self.push(v, Op::AddConst(a))
    }

    /// Multiplies `a` by a `1×1` variable.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let k = self.value(s).item();
        let v = self.map(a, |p| p * k);
        self.push(v, Op::MulScalar(a, s))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.map(a, |p| if p > 0.0 { p } else { slope * p });
        self.push(v, Op::LeakyRelu(a, slope))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.map(a, softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.map(a, f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.map(a, |p| p * p);
        self.push(v, Op::Square(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.map(a, |p| p.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    /// Per-row normalization to zero mean and unit variance (no affine terms).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        let mut rstd = Vec::with_capacity(x.rows);
        let c = x.cols as f64;
        for i in 0..x.rows {
            let row = out.row_mut(i);
            let mean = row.iter().sum::<f64>() / c;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            rstd.push(r);
        }
        self.push(out, Op::LayerNorm(a, rstd))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::hcat(&tensors);
        self.push(v, Op::Concat(parts.to_vec()))
    }

    /// Row `i` of the output is row `index[i]` of `a`.
    pub fn gather(&mut self, a: Var, index: Arc<Vec<usize>>) -> Var {
        let x = self.value(a);
        let mut out = Tensor::zeros(index.len(), x.cols);
        for (i, &j) in index.iter().enumerate() {
            out.row_mut(i).copy_from_slice(x.row(j));
        }
        self.push(out, Op::Gather(a, index))
    }

    /// Rows `start..start + len` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.rows, "row slice out of range");
        let out = Tensor::from_vec(len, x.cols, x.data[start * x.cols..(start + len) * x.cols].to_vec());
        self.push(out, Op::SliceRows(a, start))
    }

    /// Row `s` of the output sums the rows `i` of `a` with `segment[i] == s`.
    pub fn segment_sum(&mut self, a: Var, segment: Arc<Vec<usize>>, num_segments: usize) -> Var {
        let x = self.value(a);
        let mut out = Tensor::zeros(num_segments, x.cols);
        for (i, &s) in segment.iter().enumerate() {
            for (o, v) in out.row_mut(s).iter_mut().zip(x.row(i)) {
                *o += v;
            }
        }
        self.push(out, Op::SegmentSum(a, segment))
    }

    /// Segment mean; empty segments yield zero rows.
    pub fn segment_mean(&mut self, a: Var, segment: Arc<Vec<usize>>, num_segments: usize) -> Var {
        let x = self.value(a);
        let counts = segment_counts(&segment, num_segments);
        let mut out = Tensor::zeros(num_segments, x.cols);
        for (i, &s) in segment.iter().enumerate() {
            let k = counts[s] as f64;
            for (o, v) in out.row_mut(s).iter_mut().zip(x.row(i)) {
                *o += v / k;
            }
        }
        self.push(out, Op::SegmentMean(a, segment, counts))
    }

    /// Column-wise segment minimum; empty segments yield zero rows.
    pub fn segment_min(&mut self, a: Var, segment: &[usize], num_segments: usize) -> Var {
        let x = self.value(a);
        let cols = x.cols;
        let mut arg = vec![usize::MAX; num_segments * cols];
        for (i, &s) in segment.iter().enumerate() {
            for c in 0..cols {
                let slot = &mut arg[s * cols + c];
                if *slot == usize::MAX || x.get(i, c) < x.get(*slot, c) {
                    *slot = i;
                }
            }
        }
        let mut out = Tensor::zeros(num_segments, cols);
        for (k, &i) in arg.iter().enumerate() {
            if i != usize::MAX {
                out.data[k] = x.get(i, k % cols);
            }
        }
        self.push(out, Op::SegmentMin(a, arg))
    }

    /// Log-softmax of a column vector within each segment.
    pub fn segment_log_softmax(&mut self, a: Var, segment: Arc<Vec<usize>>, num_segments: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.cols, 1, "segment_log_softmax expects a column vector");
        let mut max = vec![f64::NEG_INFINITY; num_segments];
        for (i, &s) in segment.iter().enumerate() {
            max[s] = max[s].max(x.data[i]);
        }
        let mut sum = vec![0.0; num_segments];
        for (i, &s) in segment.iter().enumerate() {
            sum[s] += (x.data[i] - max[s]).exp();
        }
        let lse: Vec<f64> = (0..num_segments).map(|s| max[s] + sum[s].ln()).collect();
        let out: Vec<f64> = segment.iter().enumerate().map(|(i, &s)| x.data[i] - lse[s]).collect();
        let probs = out.iter().map(|v| v.exp()).collect();
        self.push(Tensor::column(out), Op::SegmentLogSoftmax(a, segment, probs))
    }

    /// Broadcasts a `1×c` row to `n` rows.
    pub fn repeat_row(&mut self, a: Var, n: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.rows, 1, "repeat_row expects a single row");
        let mut data = Vec::with_capacity(n * x.cols);
        for _ in 0..n {
            data.extend_from_slice(&x.data);
        }
        let v = Tensor::from_vec(n, x.cols, data);
        self.push(v, Op::RepeatRow(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = if x.is_empty() { 0.0 } else { x.data.iter().sum::<f64>() / x.len() as f64 };
        self.push(Tensor::scalar(s), Op::MeanAll(a))
    }

    /// Gradients of a scalar `loss` with respect to every parameter in `store`.
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Numerical(format!("loss must be scalar, got {}x{}", lv.rows, lv.cols)));
        }
        if !lv.all_finite() {
            return Err(Error::Numerical(format!("non-finite loss {}", lv.item())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::zeros_like(store);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let x = |v: Var| &self.nodes[v.0].value;
            // gradients are only formed for nodes that lead to a parameter
            macro_rules! acc {
                ($v:expr, $t:expr) => {{
                    let v: Var = $v;
                    if self.nodes[v.0].grad {
                        let t = $t;
                        match &mut grads[v.0] {
                            Some(e) => e.add_assign(&t),
                            slot @ None => *slot = Some(t),
                        }
                    }
                }};
            }
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.0[*id].add_assign(&g),
                Op::MatMul(a, b) => {
                    acc!(*a, g.matmul_t(x(*b)));
                    acc!(*b, x(*a).t_matmul(&g));
                }
                Op::AddRow(a, r) => {
                    let mut gr = Tensor::zeros(1, g.cols);
                    for i in 0..g.rows {
                        for (o, v) in gr.data.iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    acc!(*r, gr);
                    acc!(*a, g);
                }
                Op::MulRow(a, r) => {
                    let (xa, xr) = (x(*a), x(*r));
                    let mut gr = Tensor::zeros(1, g.cols);
                    let mut ga = g.clone();
                    for i in 0..g.rows {
                        for c in 0..g.cols {
                            gr.data[c] += g.get(i, c) * xa.get(i, c);
                            ga.data[i * g.cols + c] *= xr.data[c];
                        }
                    }
                    acc!(*r, gr);
                    acc!(*a, ga);
                }
                Op::Add(a, b) => {
                    acc!(*a, g.clone());
                    acc!(*b, g);
                }
                Op::Sub(a, b) => {
                    let mut neg = g.clone();
                    neg.data.iter_mut().for_each(|v| *v = -*v);
                    acc!(*a, g);
                    acc!(*b, neg);
                }
                Op::Mul(a, b) => {
                    let (xa, xb) = (x(*a), x(*b));
                    acc!(*a, elementwise(&g, xb, |g, y| g * y));
                    acc!(*b, elementwise(&g, xa, |g, y| g * y));
                }
                Op::Scale(a, k) => acc!(*a, map(&g, |v| v * k)),
                Op::AddConst(a) => acc!(*a, g),
                Op::MulScalar(a, s) => {
                    let k = x(*s).item();
                    let gs: f64 = g.data.iter().zip(&x(*a).data).map(|(p, q)| p * q).sum();
                    acc!(*s, Tensor::scalar(gs));
                    acc!(*a, map(&g, |v| v * k));
                }
                Op::LeakyRelu(a, slope) => {
                    acc!(*a, elementwise(&g, x(*a), |g, y| if y > 0.0 { g } else { slope * g }));
                }
                Op::Softplus(a) => acc!(*a, elementwise(&g, x(*a), |g, y| g * sigmoid(y))),
                Op::Exp(a) => acc!(*a, elementwise(&g, &node.value, |g, y| g * y)),
                Op::Square(a) => acc!(*a, elementwise(&g, x(*a), |g, y| 2.0 * g * y)),
                Op::Min(a, b) => {
                    let (xa, xb) = (x(*a), x(*b));
                    let mask: Vec<bool> = xa.data.iter().zip(&xb.data).map(|(p, q)| p <= q).collect();
                    acc!(*a, masked(&g, &mask, true));
                    acc!(*b, masked(&g, &mask, false));
                }
                Op::Max(a, b) => {
                    let (xa, xb) = (x(*a), x(*b));
                    let mask: Vec<bool> = xa.data.iter().zip(&xb.data).map(|(p, q)| p >= q).collect();
                    acc!(*a, masked(&g, &mask, true));
                    acc!(*b, masked(&g, &mask, false));
                }
                Op::Clamp(a, lo, hi) => {
                    acc!(*a, elementwise(&g, x(*a), |g, y| if y < *lo || y > *hi { 0.0 } else { g }));
                }
                Op::LayerNorm(a, rstd) => {
                    let y = &node.value;
                    let c = y.cols as f64;
                    let mut ga = Tensor::zeros(y.rows, y.cols);
                    for i in 0..y.rows {
                        let (gr, yr) = (g.row(i), y.row(i));
                        let mg = gr.iter().sum::<f64>() / c;
                        let mgy = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / c;
                        for (k, o) in ga.row_mut(i).iter_mut().enumerate() {
                            *o = rstd[i] * (gr[k] - mg - yr[k] * mgy);
                        }
                    }
                    acc!(*a, ga);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = x(p).cols;
                        let mut gp = Tensor::zeros(g.rows, w);
                        for i in 0..g.rows {
                            gp.row_mut(i).copy_from_slice(&g.row(i)[off..off + w]);
                        }
                        off += w;
                        acc!(p, gp);
                    }
                }
                Op::Gather(a, index) => {
                    let xa = x(*a);
                    let mut ga = Tensor::zeros(xa.rows, xa.cols);
                    for (i, &j) in index.iter().enumerate() {
                        for (o, v) in ga.row_mut(j).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    acc!(*a, ga);
                }
                Op::SliceRows(a, start) => {
                    acc!(*a, {
                        let xa = x(*a);
                        let mut ga = Tensor::zeros(xa.rows, xa.cols);
                        ga.data[start * xa.cols..start * xa.cols + g.data.len()].copy_from_slice(&g.data);
                        ga
                    });
                }
                Op::SegmentSum(a, seg) => {
                    let xa = x(*a);
                    let mut ga = Tensor::zeros(xa.rows, xa.cols);
                    for (i, &s) in seg.iter().enumerate() {
                        ga.row_mut(i).copy_from_slice(g.row(s));
                    }
                    acc!(*a, ga);
                }
                Op::SegmentMean(a, seg, counts) => {
                    let xa = x(*a);
                    let mut ga = Tensor::zeros(xa.rows, xa.cols);
                    for (i, &s) in seg.iter().enumerate() {
                        let k = counts[s] as f64;
                        for (o, v) in ga.row_mut(i).iter_mut().zip(g.row(s)) {
                            *o = v / k;
                        }
                    }
                    acc!(*a, ga);
                }
                Op::SegmentMin(a, arg) => {
                    let xa = x(*a);
                    let cols = xa.cols;
                    let mut ga = Tensor::zeros(xa.rows, cols);
                    for (k, &i) in arg.iter().enumerate() {
                        if i != usize::MAX {
                            ga.data[i * cols + k % cols] += g.data[k];
                        }
                    }
                    acc!(*a, ga);
                }
                Op::SegmentLogSoftmax(a, seg, probs) => {
                    let n = seg.iter().max().map_or(0, |m| m + 1);
                    let mut gsum = vec![0.0; n];
                    for (i, &s) in seg.iter().enumerate() {
                        gsum[s] += g.data[i];
                    }
                    let ga = (0..seg.len()).map(|i| g.data[i] - probs[i] * gsum[seg[i]]).collect();
                    acc!(*a, Tensor::column(ga));
                }
                Op::RepeatRow(a) => {
                    let mut ga = Tensor::zeros(1, g.cols);
                    for i in 0..g.rows {
                        for (o, v) in ga.data.iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    acc!(*a, ga);
                }
                Op::SumAll(a) => {
                    let xa = x(*a);
                    acc!(*a, Tensor::filled(xa.rows, xa.cols, g.item()));
                }
                Op::MeanAll(a) => {
                    let xa = x(*a);
                    let n = xa.len().max(1) as f64;
                    acc!(*a, Tensor::filled(xa.rows, xa.cols, g.item() / n));
                }
            }
        }
        Ok(out)
    }
}

fn elementwise(g: &Tensor, y: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        rows: g.rows,
        cols: g.cols,
        data: g.data.iter().zip(&y.data).map(|(a, b)| f(*a, *b)).collect(),
    }
}

fn map(g: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor { rows: g.rows, cols: g.cols, data: g.data.iter().map(|a| f(*a)).collect() }
}

fn masked(g: &Tensor, mask: &[bool], keep: bool) -> Tensor {
    Tensor {
        rows: g.rows,
        cols: g.cols,
        data: g.data.iter().zip(mask).map(|(v, &m)| if m == keep { *v } else { 0.0 }).collect(),
    }
}
