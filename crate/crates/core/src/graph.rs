//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation applied during one forward pass and
//! replays them backwards in [`Graph::backward`]. Nodes are addressed by the
//! copyable [`Var`] handle. Parameters from a [`ParamStore`] enter the graph
//! through [`Graph::param`], which caches the leaf so that a parameter used by
//! several sub-networks (weight sharing) accumulates a single gradient.
//!
//! Besides the elementwise and linear-algebra primitives, a few fused kernels
//! (multi-head attention, layer normalisation, softmax cross-entropy,
//! straight-through selection) carry hand-derived backward passes. Each is
//! covered by a finite-difference check in the test suite.

use std::collections::HashMap;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use crate::nn::{ParamId, ParamStore};

pub type Mat = Array2<f64>;

/// Inputs below this value are clamped before taking a logarithm.
pub const LOG_FLOOR: f64 = 1e-20;

const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Layout of a batched attention call: `batch` independent sequences whose
/// rows are stacked contiguously in the query and key/value matrices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnLayout {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    pub causal: bool,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    DivScalar(Var, Var),
    Elu(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Transpose(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    SegmentMean(Var, Vec<(usize, usize)>),
    Sum(Var),
    RowNormalize(Var, Vec<f64>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttnLayout,
        probs: Vec<Mat>,
    },
    WeightedNll {
        logits: Var,
        targets: Vec<Option<usize>>,
        weights: Vec<f64>,
        normalizer: f64,
        probs: Mat,
    },
    SelectRows {
        weights: Var,
        actions: Vec<Var>,
        chosen: Vec<usize>,
    },
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// One forward pass worth of recorded computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Result of [`Graph::backward`]: one optional gradient per node.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    /// Gradients of every parameter that took part in the pass.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Mat)> + '_ {
        self.params
            .iter()
            .filter_map(move |&(id, v)| self.grads[v.0].as_ref().map(|g| (id, g)))
    }
}

fn row_softmax(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn row_log_softmax(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

fn elu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        v.exp_m1()
    }
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

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[(0, 0)]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A free leaf that receives a gradient (used by gradient checks).
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Bring a stored parameter into the graph. Repeated calls return the same
    /// node so that shared weights accumulate one gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    /// Copy of `v` cut off from the gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMulT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// `x + b` where `b` is a single row broadcast over the rows of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let bias = self.value(b);
        assert_eq!(bias.nrows(), 1, "add_row expects a 1×n bias");
        let value = self.value(x) + bias;
        let ng = self.ng(x) || self.ng(b);
        self.push(value, Op::AddRow(x, b), ng)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x) * c;
        let ng = self.ng(x);
        self.push(value, Op::Scale(x, c), ng)
    }

    /// `x / s` for a 1×1 node `s`.
    pub fn div_scalar(&mut self, x: Var, s: Var) -> Var {
        let d = self.scalar(s);
        let value = self.value(x) / d;
        let ng = self.ng(x) || self.ng(s);
        self.push(value, Op::DivScalar(x, s), ng)
    }

    pub fn elu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(elu);
        let ng = self.ng(x);
        self.push(value, Op::Elu(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v.max(0.0));
        let ng = self.ng(x);
        self.push(value, Op::Relu(x), ng)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::exp);
        let ng = self.ng(x);
        self.push(value, Op::Exp(x), ng)
    }

    /// Natural log with the input clamped at [`LOG_FLOOR`].
    pub fn log(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v.max(LOG_FLOOR).ln());
        let ng = self.ng(x);
        self.push(value, Op::Log(x), ng)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v * v);
        let ng = self.ng(x);
        self.push(value, Op::Square(x), ng)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).t().to_owned();
        let ng = self.ng(x);
        self.push(value, Op::Transpose(x), ng)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let value = row_softmax(self.value(x));
        let ng = self.ng(x);
        self.push(value, Op::SoftmaxRows(x), ng)
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let value = row_log_softmax(self.value(x));
        let ng = self.ng(x);
        self.push(value, Op::LogSoftmaxRows(x), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.value(x).slice(s![.., start..start + len]).to_owned();
        let ng = self.ng(x);
        self.push(value, Op::SliceCols(x, start), ng)
    }

    /// Row `i` of the output is row `idx[i]` of `x` (embedding lookup).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let src = self.value(x);
        let mut value = Mat::zeros((idx.len(), src.ncols()));
        for (i, &r) in idx.iter().enumerate() {
            value.row_mut(i).assign(&src.row(r));
        }
        let ng = self.ng(x);
        self.push(value, Op::GatherRows(x, idx.to_vec()), ng)
    }

    /// Output row `k` is the mean of rows `start..start+len` of segment `k`.
    pub fn segment_mean(&mut self, x: Var, segments: &[(usize, usize)]) -> Var {
        let src = self.value(x);
        let mut value = Mat::zeros((segments.len(), src.ncols()));
        for (k, &(start, len)) in segments.iter().enumerate() {
            assert!(len > 0, "segment_mean: empty segment");
            let mean = src
                .slice(s![start..start + len, ..])
                .mean_axis(Axis(0))
                .expect("non-empty segment");
            value.row_mut(k).assign(&mean);
        }
        let ng = self.ng(x);
        self.push(value, Op::SegmentMean(x, segments.to_vec()), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Mat::from_elem((1, 1), self.value(x).sum());
        let ng = self.ng(x);
        self.push(value, Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Scale every row to unit Euclidean norm. All-zero rows stay zero.
    pub fn row_normalize(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let norms: Vec<f64> = src
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt().max(NORM_EPS))
            .collect();
        let mut value = src.clone();
        for (mut row, &n) in value.rows_mut().into_iter().zip(&norms) {
            row.mapv_inplace(|v| v / n);
        }
        let ng = self.ng(x);
        self.push(value, Op::RowNormalize(x, norms), ng)
    }

    /// Row-wise layer normalisation with learned gain and bias (both 1×d).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let src = self.value(x);
        let d = src.ncols() as f64;
        let mut xhat = src.clone();
        let mut inv_std = Vec::with_capacity(src.nrows());
        for mut row in xhat.rows_mut() {
            let mu = row.sum() / d;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mu) * inv);
            inv_std.push(inv);
        }
        let value = &xhat * self.value(gamma) + self.value(beta);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Scaled dot-product attention with `layout.heads` heads over already
    /// projected queries, keys and values.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttnLayout) -> Var {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let d = qm.ncols();
        assert_eq!(d % layout.heads, 0, "model width must divide into heads");
        assert_eq!(qm.nrows(), layout.batch * layout.q_len);
        assert_eq!(km.nrows(), layout.batch * layout.k_len);
        if layout.causal {
            assert_eq!(layout.q_len, layout.k_len, "causal attention needs square blocks");
        }
        let dh = d / layout.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Mat::zeros((qm.nrows(), d));
        let mut probs = Vec::with_capacity(layout.batch * layout.heads);
        for b in 0..layout.batch {
            let qr = b * layout.q_len..(b + 1) * layout.q_len;
            let kr = b * layout.k_len..(b + 1) * layout.k_len;
            for h in 0..layout.heads {
                let hc = h * dh..(h + 1) * dh;
                let qb = qm.slice(s![qr.clone(), hc.clone()]);
                let kb = km.slice(s![kr.clone(), hc.clone()]);
                let vb = vm.slice(s![kr.clone(), hc.clone()]);
                let mut scores = qb.dot(&kb.t()) * scale;
                if layout.causal {
                    for i in 0..layout.q_len {
                        for j in i + 1..layout.k_len {
                            scores[(i, j)] = f64::NEG_INFINITY;
                        }
                    }
                }
                let p = row_softmax(&scores);
                out.slice_mut(s![qr.clone(), hc]).assign(&p.dot(&vb));
                probs.push(p);
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            },
            ng,
        )
    }

    /// Mean softmax cross-entropy over the rows whose target is `Some`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let count = targets.iter().filter(|t| t.is_some()).count();
        let weights = vec![1.0; targets.len()];
        self.weighted_nll(logits, targets, &weights, count.max(1) as f64)
    }

    /// `Σ_i w_i · (−log softmax(logits_i)[t_i]) / normalizer` over rows with a
    /// target. With unit weights this is the usual token cross-entropy.
    pub fn weighted_nll(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
        weights: &[f64],
        normalizer: f64,
    ) -> Var {
        let lm = self.value(logits);
        assert_eq!(lm.nrows(), targets.len());
        assert_eq!(weights.len(), targets.len());
        let logp = row_log_softmax(lm);
        let mut total = 0.0;
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                total -= weights[i] * logp[(i, t)];
            }
        }
        let probs = logp.mapv(f64::exp);
        let ng = self.ng(logits);
        self.push(
            Mat::from_elem((1, 1), total / normalizer),
            Op::WeightedNll {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                normalizer,
                probs,
            },
            ng,
        )
    }

    /// Hard selection with a straight-through gradient.
    ///
    /// `weights` is B×K; every action is a (B·R)×d matrix holding R rows per
    /// batch item. The forward value copies, for item b, the rows of action
    /// `chosen[b]` verbatim. Backward treats the output as
    /// `Σ_k onehot_k · a_k` for the actions and as `Σ_k w_k · a_k` for the
    /// weights, so `∂L/∂w[b,k] = ⟨G_b, a_k,b⟩`.
    pub fn select_rows(&mut self, weights: Var, actions: &[Var], chosen: &[usize]) -> Var {
        let (b, k) = self.shape(weights);
        assert_eq!(k, actions.len());
        assert_eq!(b, chosen.len());
        let (rows, d) = self.shape(actions[0]);
        assert_eq!(rows % b, 0);
        let r = rows / b;
        let mut value = Mat::zeros((rows, d));
        for (item, &c) in chosen.iter().enumerate() {
            let src = self.value(actions[c]).slice(s![item * r..(item + 1) * r, ..]);
            value.slice_mut(s![item * r..(item + 1) * r, ..]).assign(&src);
        }
        let ng = self.ng(weights) || actions.iter().any(|&a| self.ng(a));
        self.push(
            value,
            Op::SelectRows {
                weights,
                actions: actions.to_vec(),
                chosen: chosen.to_vec(),
            },
            ng,
        )
    }

    /// Linear layer: `x · w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    /// Back-propagate from the 1×1 node `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward expects a scalar loss");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let params = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        Gradients { grads, params }
    }

    fn acc(&self, grads: &mut [Option<Mat>], v: Var, delta: Mat) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => *g += &delta,
            slot => *slot = Some(delta),
        }
    }

    fn propagate(&self, idx: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g.dot(self.value(*b)));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, g.t().dot(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g * self.value(*b));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, g * self.value(*a));
                }
            }
            Op::AddRow(x, b) => {
                self.acc(grads, *x, g.clone());
                if self.ng(*b) {
                    self.acc(grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Scale(x, c) => self.acc(grads, *x, g * *c),
            Op::DivScalar(x, s) => {
                let d = self.scalar(*s);
                self.acc(grads, *x, g / d);
                if self.ng(*s) {
                    let ds = -(g * self.value(*x)).sum() / (d * d);
                    self.acc(grads, *s, Mat::from_elem((1, 1), ds));
                }
            }
            Op::Elu(x) => {
                let mut dx = g.clone();
                Zip::from(&mut dx)
                    .and(self.value(*x))
                    .for_each(|d, &v| {
                        if v <= 0.0 {
                            *d *= v.exp();
                        }
                    });
                self.acc(grads, *x, dx);
            }
            Op::Relu(x) => {
                let mut dx = g.clone();
                Zip::from(&mut dx)
                    .and(self.value(*x))
                    .for_each(|d, &v| {
                        if v <= 0.0 {
                            *d = 0.0;
                        }
                    });
                self.acc(grads, *x, dx);
            }
            Op::Exp(x) => self.acc(grads, *x, g * y),
            Op::Log(x) => {
                let mut dx = g.clone();
                Zip::from(&mut dx)
                    .and(self.value(*x))
                    .for_each(|d, &v| {
                        *d = if v > LOG_FLOOR { *d / v } else { 0.0 };
                    });
                self.acc(grads, *x, dx);
            }
            Op::Square(x) => self.acc(grads, *x, g * self.value(*x) * 2.0),
            Op::Transpose(x) => self.acc(grads, *x, g.t().to_owned()),
            Op::SoftmaxRows(x) => {
                let mut dx = g * y;
                for (mut row, yr) in dx.rows_mut().into_iter().zip(y.rows()) {
                    let dot = row.sum();
                    Zip::from(&mut row).and(&yr).for_each(|d, &p| *d -= p * dot);
                }
                self.acc(grads, *x, dx);
            }
            Op::LogSoftmaxRows(x) => {
                let mut dx = g.clone();
                for (mut row, yr) in dx.rows_mut().into_iter().zip(y.rows()) {
                    let total = row.sum();
                    Zip::from(&mut row)
                        .and(&yr)
                        .for_each(|d, &lp| *d -= lp.exp() * total);
                }
                self.acc(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).ncols();
                    if self.ng(p) {
                        self.acc(grads, p, g.slice(s![.., start..start + w]).to_owned());
                    }
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let h = self.value(p).nrows();
                    if self.ng(p) {
                        self.acc(grads, p, g.slice(s![start..start + h, ..]).to_owned());
                    }
                    start += h;
                }
            }
            Op::SliceCols(x, start) => {
                let mut dx = Mat::zeros(self.shape(*x));
                dx.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                self.acc(grads, *x, dx);
            }
            Op::GatherRows(x, idx) => {
                let mut dx = Mat::zeros(self.shape(*x));
                for (i, &r) in idx.iter().enumerate() {
                    let mut dst = dx.row_mut(r);
                    dst += &g.row(i);
                }
                self.acc(grads, *x, dx);
            }
            Op::SegmentMean(x, segments) => {
                let mut dx = Mat::zeros(self.shape(*x));
                for (k, &(start, len)) in segments.iter().enumerate() {
                    let share = g.row(k).mapv(|v| v / len as f64);
                    for r in start..start + len {
                        let mut dst = dx.row_mut(r);
                        dst += &share;
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::Sum(x) => {
                let dx = Mat::from_elem(self.shape(*x), g[(0, 0)]);
                self.acc(grads, *x, dx);
            }
            Op::RowNormalize(x, norms) => {
                let mut dx = g.clone();
                for ((mut row, yr), &n) in dx.rows_mut().into_iter().zip(y.rows()).zip(norms) {
                    let dot = row.dot(&yr);
                    Zip::from(&mut row)
                        .and(&yr)
                        .for_each(|d, &yv| *d = (*d - yv * dot) / n);
                }
                self.acc(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                if self.ng(*gamma) {
                    let dg = (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.acc(grads, *gamma, dg);
                }
                if self.ng(*beta) {
                    self.acc(grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.ng(*x) {
                    let dxhat = g * self.value(*gamma);
                    let d = xhat.ncols() as f64;
                    let mut dx = dxhat.clone();
                    for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
                        let xh = xhat.row(i);
                        let sum_d = row.sum();
                        let sum_dx = row.dot(&xh);
                        let inv = inv_std[i];
                        Zip::from(&mut row).and(&xh).for_each(|v, &h| {
                            *v = inv / d * (d * *v - sum_d - h * sum_dx);
                        });
                    }
                    self.acc(grads, *x, dx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            } => self.attention_backward(g, *q, *k, *v, layout, probs, grads),
            Op::WeightedNll {
                logits,
                targets,
                weights,
                normalizer,
                probs,
            } => {
                let scale = g[(0, 0)] / normalizer;
                let mut dx = Mat::zeros(probs.dim());
                for (i, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        let w = weights[i] * scale;
                        let mut row = dx.row_mut(i);
                        row.assign(&probs.row(i));
                        row[t] -= 1.0;
                        row *= w;
                    }
                }
                self.acc(grads, *logits, dx);
            }
            Op::SelectRows {
                weights,
                actions,
                chosen,
            } => {
                let b = chosen.len();
                let r = g.nrows() / b;
                if self.ng(*weights) {
                    let mut dw = Mat::zeros((b, actions.len()));
                    for (kk, &a) in actions.iter().enumerate() {
                        let am = self.value(a);
                        for item in 0..b {
                            let rows = item * r..(item + 1) * r;
                            let gs = g.slice(s![rows.clone(), ..]);
                            let as_ = am.slice(s![rows, ..]);
                            dw[(item, kk)] = Zip::from(&gs).and(&as_).fold(0.0, |acc, &x, &y| acc + x * y);
                        }
                    }
                    self.acc(grads, *weights, dw);
                }
                for (kk, &a) in actions.iter().enumerate() {
                    if !self.ng(a) {
                        continue;
                    }
                    let mut da = Mat::zeros(g.dim());
                    for (item, &c) in chosen.iter().enumerate() {
                        if c == kk {
                            let rows = item * r..(item + 1) * r;
                            da.slice_mut(s![rows.clone(), ..]).assign(&g.slice(s![rows, ..]));
                        }
                    }
                    self.acc(grads, a, da);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &Mat,
        q: Var,
        k: Var,
        v: Var,
        layout: &AttnLayout,
        probs: &[Mat],
        grads: &mut [Option<Mat>],
    ) {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let d = qm.ncols();
        let dh = d / layout.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Mat::zeros(qm.dim());
        let mut dk = Mat::zeros(km.dim());
        let mut dv = Mat::zeros(vm.dim());
        for b in 0..layout.batch {
            let qr = b * layout.q_len..(b + 1) * layout.q_len;
            let kr = b * layout.k_len..(b + 1) * layout.k_len;
            for h in 0..layout.heads {
                let hc = h * dh..(h + 1) * dh;
                let p = &probs[b * layout.heads + h];
                let gb = g.slice(s![qr.clone(), hc.clone()]);
                let qb = qm.slice(s![qr.clone(), hc.clone()]);
                let kb = km.slice(s![kr.clone(), hc.clone()]);
                let vb = vm.slice(s![kr.clone(), hc.clone()]);
                {
                    let mut dst = dv.slice_mut(s![kr.clone(), hc.clone()]);
                    dst += &p.t().dot(&gb);
                }
                let dp = gb.dot(&vb.t());
                let mut ds = &dp * p;
                for (mut row, pr) in ds.rows_mut().into_iter().zip(p.rows()) {
                    let total = row.sum();
                    Zip::from(&mut row).and(&pr).for_each(|d, &pv| *d -= pv * total);
                }
                ds *= scale;
                {
                    let mut dst = dq.slice_mut(s![qr.clone(), hc.clone()]);
                    dst += &ds.dot(&kb);
                }
                {
                    let mut dst = dk.slice_mut(s![kr.clone(), hc.clone()]);
                    dst += &ds.t().dot(&qb);
                }
            }
        }
        self.acc(grads, q, dq);
        self.acc(grads, k, dk);
        self.acc(grads, v, dv);
    }
}
