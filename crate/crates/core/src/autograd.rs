//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters enter
//! the tape as leaves bound to a [`ParamStore`]; constants (inputs, masks,
//! detached values) enter as leaves that never receive gradient. Calling
//! [`Tape::backward`] walks the tape in reverse creation order, which is a
//! valid topological order because a node can only reference earlier nodes.
//!
//! Everything is a rank-2 matrix. Row vectors are `1×n`, scalars are `1×1`.

use std::collections::{BTreeMap, HashMap};

use ndarray::{s, Array2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::params::{ParamId, ParamStore};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Value used in place of `-inf` for masked attention logits.
pub const MASKED: f64 = -1.0e30;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Log(Var),
    SoftmaxRows(Var),
    Normalize(Var, Vec<f64>),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
    SumAll(Var),
    BceLogits {
        logits: Var,
        targets: Mat,
        w_pos: Mat,
        w_neg: Mat,
    },
}

struct Node {
    value: Mat,
    op: Op,
    param: Option<ParamId>,
    requires_grad: bool,
}

/// Parameter gradients produced by one backward pass.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: BTreeMap<ParamId, Mat>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Mat)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Adds `other` into `self`, entry by entry.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (id, g) in other.iter() {
            match self.grads.get_mut(&id) {
                Some(acc) => *acc += g,
                None => {
                    self.grads.insert(id, g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.values_mut() {
            g.mapv_inplace(|v| v * factor);
        }
    }
}

pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    rng: Option<ChaCha8Rng>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(x)` without overflow.
fn log_sigmoid(x: f64) -> f64 {
    -((-x).max(0.0) + (-x.abs()).exp().ln_1p())
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    sigmoid(x)
}

impl<'s> Tape<'s> {
    /// Tape for inference: dropout is the identity.
    pub fn new(store: &'s ParamStore) -> Self {
        Tape {
            store,
            nodes: Vec::with_capacity(512),
            param_vars: HashMap::new(),
            rng: None,
        }
    }

    /// Tape for training: dropout masks are drawn from a generator seeded by `seed`.
    pub fn training(store: &'s ParamStore, seed: u64) -> Self {
        let mut tape = Tape::new(store);
        tape.rng = Some(ChaCha8Rng::seed_from_u64(seed));
        tape
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.iter().all(|v| !v.is_nan()), "NaN produced by {op:?}");
        self.nodes.push(Node {
            value,
            op,
            param: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let value = self.store.get(id).clone();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            param: Some(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies the value of `v` into a fresh constant leaf. No gradient flows back through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMulT(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    /// Adds a `1×m` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "add_row expects a row vector");
        let value = self.value(a) + self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::AddRow(a, row), rg)
    }

    /// Multiplies every row of `a` elementwise by a `1×m` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "mul_row expects a row vector");
        let value = self.value(a) * self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::MulRow(a, row), rg)
    }

    /// Scales row `i` of `a` by `col[i, 0]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        assert_eq!(self.shape(col).1, 1, "mul_col expects a column vector");
        let value = self.value(a) * self.value(col);
        let rg = self.rg(a) || self.rg(col);
        self.push(value, Op::MulCol(a, col), rg)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a) * factor;
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, factor), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) + c;
        let rg = self.rg(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        let rg = self.rg(a);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|v| v.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::ln);
        let rg = self.rg(a);
        self.push(value, Op::Log(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        let rg = self.rg(a);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    /// Per-row standardization `(x - mean) / sqrt(var + eps)` with the biased variance.
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let mut value = self.value(a).clone();
        let width = value.ncols() as f64;
        let mut inv_std = Vec::with_capacity(value.nrows());
        for mut row in value.rows_mut() {
            let mean = row.sum() / width;
            let var = row.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / width;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
            inv_std.push(inv);
        }
        let rg = self.rg(a);
        self.push(value, Op::Normalize(a, inv_std), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows width mismatch");
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols height mismatch");
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![start..start + len, ..]).to_owned();
        let rg = self.rg(a);
        self.push(value, Op::SliceRows(a, start), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        let rg = self.rg(a);
        self.push(value, Op::SliceCols(a, start), rg)
    }

    /// Stacks rows `a[idx[0]], a[idx[1]], ...`; used for embedding lookup.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let src = self.value(a);
        let mut value = Mat::zeros((idx.len(), src.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            value.row_mut(r).assign(&src.row(i));
        }
        let rg = self.rg(a);
        self.push(value, Op::GatherRows(a, idx.to_vec()), rg)
    }

    /// Column vector with `out[t] = a[t, idx[t]]`.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Var {
        let src = self.value(a);
        assert_eq!(src.nrows(), idx.len(), "pick needs one index per row");
        let value = Mat::from_shape_fn((idx.len(), 1), |(t, _)| src[[t, idx[t]]]);
        let rg = self.rg(a);
        self.push(value, Op::Pick(a, idx.to_vec()), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Mat::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::SumAll(a), rg)
    }

    /// Weighted binary cross-entropy on logits, summed over all entries:
    /// `-Σ [w_pos·l·ln σ(x) + w_neg·(1-l)·ln(1-σ(x))]`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Mat, w_pos: Mat, w_neg: Mat) -> Var {
        let x = self.value(logits);
        assert_eq!(x.dim(), targets.dim());
        assert_eq!(x.dim(), w_pos.dim());
        assert_eq!(x.dim(), w_neg.dim());
        let mut total = 0.0;
        for (((&xi, &l), &wp), &wn) in x.iter().zip(&targets).zip(&w_pos).zip(&w_neg) {
            let pos = if wp * l != 0.0 { wp * l * log_sigmoid(xi) } else { 0.0 };
            let neg = if wn * (1.0 - l) != 0.0 {
                wn * (1.0 - l) * log_sigmoid(-xi)
            } else {
                0.0
            };
            total -= pos + neg;
        }
        let rg = self.rg(logits);
        self.push(
            Mat::from_elem((1, 1), total),
            Op::BceLogits {
                logits,
                targets,
                w_pos,
                w_neg,
            },
            rg,
        )
    }

    /// Inverted dropout. Identity on an inference tape or when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64) -> Var {
        if p <= 0.0 {
            return a;
        }
        let Some(rng) = self.rng.as_mut() else {
            return a;
        };
        let keep = 1.0 - p;
        let (r, c) = self.nodes[a.0].value.dim();
        let mask = Mat::from_shape_simple_fn((r, c), || {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        let m = self.constant(mask);
        self.mul(a, m)
    }

    /// Runs reverse accumulation from `loss` and returns the gradient of every
    /// parameter the loss depends on. Parameters outside the dependency cone
    /// are absent from the result.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Mat>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Mat::ones(self.value(loss).dim()));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            if let Some(pid) = node.param {
                out.grads.insert(pid, g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        out
    }

    fn acc(&self, grads: &mut [Option<Mat>], v: Var, delta: Mat) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    self.acc(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.rg(*b) {
                    self.acc(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.rg(*a) {
                    self.acc(grads, *a, g.dot(self.value(*b)));
                }
                if self.rg(*b) {
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
                if self.rg(*a) {
                    self.acc(grads, *a, g * self.value(*b));
                }
                if self.rg(*b) {
                    self.acc(grads, *b, g * self.value(*a));
                }
            }
            Op::AddRow(a, r) => {
                self.acc(grads, *a, g.clone());
                if self.rg(*r) {
                    self.acc(grads, *r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(a, r) => {
                if self.rg(*a) {
                    self.acc(grads, *a, g * self.value(*r));
                }
                if self.rg(*r) {
                    let prod = g * self.value(*a);
                    self.acc(grads, *r, prod.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulCol(a, c) => {
                if self.rg(*a) {
                    self.acc(grads, *a, g * self.value(*c));
                }
                if self.rg(*c) {
                    let prod = g * self.value(*a);
                    self.acc(grads, *c, prod.sum_axis(Axis(1)).insert_axis(Axis(1)));
                }
            }
            Op::Scale(a, f) => self.acc(grads, *a, g * *f),
            Op::AddScalar(a) => self.acc(grads, *a, g.clone()),
            Op::Sigmoid(a) => {
                let d = ndarray::Zip::from(g).and(y).map_collect(|&g, &y| g * y * (1.0 - y));
                self.acc(grads, *a, d);
            }
            Op::Tanh(a) => {
                let d = ndarray::Zip::from(g).and(y).map_collect(|&g, &y| g * (1.0 - y * y));
                self.acc(grads, *a, d);
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let d = ndarray::Zip::from(g)
                    .and(x)
                    .map_collect(|&g, &x| if x > 0.0 { g } else { 0.0 });
                self.acc(grads, *a, d);
            }
            Op::Log(a) => {
                let x = self.value(*a);
                let d = ndarray::Zip::from(g).and(x).map_collect(|&g, &x| g / x);
                self.acc(grads, *a, d);
            }
            Op::SoftmaxRows(a) => {
                let mut d = g * y;
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                    let dot = drow.sum();
                    drow.zip_mut_with(&yrow, |dv, &yv| *dv -= yv * dot);
                }
                self.acc(grads, *a, d);
            }
            Op::Normalize(a, inv_std) => {
                let width = y.ncols() as f64;
                let mut d = Mat::zeros(y.dim());
                for (r, inv) in inv_std.iter().enumerate() {
                    let grow = g.row(r);
                    let yrow = y.row(r);
                    let sum_g = grow.sum();
                    let sum_gy = grow.dot(&yrow);
                    for c in 0..y.ncols() {
                        d[[r, c]] =
                            inv / width * (width * grow[c] - sum_g - yrow[c] * sum_gy);
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::Transpose(a) => self.acc(grads, *a, g.t().to_owned()),
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let n = self.value(*p).nrows();
                    if self.rg(*p) {
                        self.acc(grads, *p, g.slice(s![start..start + n, ..]).to_owned());
                    }
                    start += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let n = self.value(*p).ncols();
                    if self.rg(*p) {
                        self.acc(grads, *p, g.slice(s![.., start..start + n]).to_owned());
                    }
                    start += n;
                }
            }
            Op::SliceRows(a, start) => {
                if self.rg(*a) {
                    let mut d = Mat::zeros(self.value(*a).dim());
                    d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                    self.acc(grads, *a, d);
                }
            }
            Op::SliceCols(a, start) => {
                if self.rg(*a) {
                    let mut d = Mat::zeros(self.value(*a).dim());
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                    self.acc(grads, *a, d);
                }
            }
            Op::GatherRows(a, idx) => {
                if self.rg(*a) {
                    let mut d = Mat::zeros(self.value(*a).dim());
                    for (r, &i) in idx.iter().enumerate() {
                        let mut row = d.row_mut(i);
                        row += &g.row(r);
                    }
                    self.acc(grads, *a, d);
                }
            }
            Op::Pick(a, idx) => {
                if self.rg(*a) {
                    let mut d = Mat::zeros(self.value(*a).dim());
                    for (t, &i) in idx.iter().enumerate() {
                        d[[t, i]] += g[[t, 0]];
                    }
                    self.acc(grads, *a, d);
                }
            }
            Op::SumAll(a) => {
                let d = Mat::from_elem(self.value(*a).dim(), g[[0, 0]]);
                self.acc(grads, *a, d);
            }
            Op::BceLogits {
                logits,
                targets,
                w_pos,
                w_neg,
            } => {
                let x = self.value(*logits);
                let scale = g[[0, 0]];
                let mut d = Mat::zeros(x.dim());
                ndarray::Zip::from(&mut d)
                    .and(x)
                    .and(targets)
                    .and(w_pos)
                    .and(w_neg)
                    .for_each(|d, &x, &l, &wp, &wn| {
                        let s = sigmoid(x);
                        *d = scale * (wn * (1.0 - l) * s - wp * l * (1.0 - s));
                    });
                self.acc(grads, *logits, d);
            }
        }
    }
}

/// Worst relative disagreement between central differences and reverse-mode
/// gradients of the scalar `f` over every entry of the listed parameters.
/// Returns the error and the parameter name where it occurred.
pub fn gradient_check(
    store: &mut ParamStore,
    ids: &[ParamId],
    eps: f64,
    f: impl Fn(&mut Tape) -> Var,
) -> (f64, String) {
    let grads = {
        let mut t = Tape::new(store);
        let l = f(&mut t);
        t.backward(l)
    };
    let eval = |store: &ParamStore| {
        let mut t = Tape::new(store);
        let l = f(&mut t);
        t.value(l)[[0, 0]]
    };
    let mut worst = (0.0, String::new());
    for &id in ids {
        let (rows, cols) = store.get(id).dim();
        for r in 0..rows {
            for c in 0..cols {
                let orig = store.get(id)[[r, c]];
                store.get_mut(id)[[r, c]] = orig + eps;
                let up = eval(store);
                store.get_mut(id)[[r, c]] = orig - eps;
                let down = eval(store);
                store.get_mut(id)[[r, c]] = orig;
                let numeric = (up - down) / (2.0 * eps);
                let analytic = grads.get(id).map_or(0.0, |g| g[[r, c]]);
                let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
                if rel > worst.0 {
                    worst = (rel, format!("{}[{r},{c}]", store.name(id)));
                }
            }
        }
    }
    worst
}
