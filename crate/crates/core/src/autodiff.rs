//! Reverse-mode differentiation over row-major `f64` matrices.
//!
//! A [`Tape`] records every operation eagerly (values are computed when the
//! node is pushed) and [`Tape::backward`] walks the nodes in reverse to
//! accumulate gradients for parameter leaves. Parameters are borrowed from
//! their [`ParamStore`], so building a graph never copies weights.
//!
//! Scalars are 1×1 matrices.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::rc::Rc;

use ndarray::{s, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::params::{ParamId, ParamStore, StoreId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamKey {
    pub store: StoreId,
    pub id: ParamId,
}

/// Boolean attention mask; `true` marks an allowed (query, key) pair.
pub type Mask = Rc<Array2<bool>>;

/// GELU (tanh form) and its derivative.
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

enum Op {
    Leaf,
    Param(ParamKey),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Array2<f64>, inv_std: Vec<f64> },
    Softmax(Var),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows { table: Var, ids: Vec<usize> },
    GatherTable { table: Var, row: usize, idx: Rc<Array2<usize>> },
    MeanRows(Var),
    SumSquares(Var),
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Array2<f64>, scale: f64 },
    Dropout { x: Var, mask: Array2<f64> },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node<'p> {
    value: Cow<'p, Array2<f64>>,
    op: Op,
    needs_grad: bool,
}

/// Gradients of parameter leaves, keyed by store and id.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    map: BTreeMap<ParamKey, Array2<f64>>,
}

impl Gradients {
    pub fn get(&self, store: StoreId, id: ParamId) -> Option<&Array2<f64>> {
        self.map.get(&ParamKey { store, id })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamKey, &Array2<f64>)> {
        self.map.iter()
    }

    pub fn has_store(&self, store: StoreId) -> bool {
        self.map.keys().any(|k| k.store == store)
    }

    pub fn accumulate(&mut self, key: ParamKey, g: &Array2<f64>) {
        match self.map.get_mut(&key) {
            Some(acc) => *acc += g,
            None => {
                self.map.insert(key, g.clone());
            }
        }
    }

    pub fn merge(&mut self, other: &Gradients) {
        for (k, g) in &other.map {
            self.accumulate(*k, g);
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.map.values_mut() {
            *g *= c;
        }
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

#[derive(Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    dropout: Option<(f64, ChaCha8Rng)>,
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), dropout: None }
    }

    /// Enables inverted dropout at `rate` for every [`Tape::maybe_dropout`] call.
    pub fn enable_dropout(&mut self, rate: f64, seed: u64) {
        if rate > 0.0 {
            self.dropout = Some((rate, ChaCha8Rng::seed_from_u64(seed)));
        }
    }

    /// Applies dropout when enabled, otherwise returns `x` unchanged.
    pub fn maybe_dropout(&mut self, x: Var) -> Var {
        let Some((rate, rng)) = self.dropout.as_mut() else { return x };
        let keep = 1.0 - *rate;
        let (r, c) = self.nodes[x.0].value.dim();
        let mask = Array2::from_shape_fn((r, c), |_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
        self.dropout(x, mask)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    fn push(&mut self, value: Cow<'p, Array2<f64>>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    /// Constant borrowed from elsewhere (e.g. frozen weights).
    pub fn constant_ref(&mut self, value: &'p Array2<f64>) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, false)
    }

    /// Differentiable leaf whose gradient is reported under `key`.
    pub fn param(&mut self, key: ParamKey, value: &'p Array2<f64>) -> Var {
        self.push(Cow::Borrowed(value), Op::Param(key), true)
    }

    /// Binds parameter `id` of `store`; frozen scopes produce constants.
    pub fn bind(&mut self, scope: Scope<'p>, id: ParamId) -> Var {
        let value = scope.store.get(id);
        if scope.trainable {
            self.param(ParamKey { store: scope.id, id }, value)
        } else {
            self.constant_ref(value)
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(Cow::Owned(v), Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        let ng = self.ng(a) || self.ng(b);
        self.push(Cow::Owned(v), Op::MatMulT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(Cow::Owned(v), Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(Cow::Owned(v), Op::Sub(a, b), ng)
    }

    /// Adds a 1×n row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(Cow::Owned(v), Op::AddRow(a, row), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(Cow::Owned(v), Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        let ng = self.ng(a);
        self.push(Cow::Owned(v), Op::Scale(a, c), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        let ng = self.ng(a);
        self.push(Cow::Owned(v), Op::Gelu(a), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.dim();
        let mut xhat = Array2::zeros((n, d));
        let mut inv_std = Vec::with_capacity(n);
        for (i, row) in xv.outer_iter().enumerate() {
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for j in 0..d {
                xhat[[i, j]] = (row[j] - mean) * inv;
            }
        }
        let out = &xhat * self.value(gain) + self.value(bias);
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(Cow::Owned(out), Op::LayerNorm { x, gain, bias, xhat, inv_std }, ng)
    }

    /// Row-wise softmax. Entries where `mask` is false get probability 0.
    pub fn softmax(&mut self, x: Var, mask: Option<&Mask>) -> Var {
        let mut out = self.value(x).clone();
        for (i, mut row) in out.outer_iter_mut().enumerate() {
            let allowed = |j: usize| mask.is_none_or(|m| m[[i, j]]);
            let mut max = f64::NEG_INFINITY;
            for (j, v) in row.iter().enumerate() {
                if allowed(j) && *v > max {
                    max = *v;
                }
            }
            let mut total = 0.0;
            for (j, v) in row.iter_mut().enumerate() {
                if allowed(j) {
                    *v = (*v - max).exp();
                    total += *v;
                } else {
                    *v = 0.0;
                }
            }
            row.mapv_inplace(|v| v / total);
        }
        let ng = self.ng(x);
        self.push(Cow::Owned(out), Op::Softmax(x), ng)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).slice(s![start..start + len, ..]).to_owned();
        let ng = self.ng(x);
        self.push(Cow::Owned(v), Op::SliceRows { x, start }, ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).slice(s![.., start..start + len]).to_owned();
        let ng = self.ng(x);
        self.push(Cow::Owned(v), Op::SliceCols { x, start }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("column counts agree");
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(Cow::Owned(v), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(Cow::Owned(v), Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut v = Array2::zeros((ids.len(), t.ncols()));
        for (i, &id) in ids.iter().enumerate() {
            v.row_mut(i).assign(&t.row(id));
        }
        let ng = self.ng(table);
        self.push(Cow::Owned(v), Op::GatherRows { table, ids: ids.to_vec() }, ng)
    }

    /// `out[i][j] = table[row][idx[i][j]]`; used for learned relative-position biases.
    pub fn gather_table(&mut self, table: Var, row: usize, idx: Rc<Array2<usize>>) -> Var {
        let t = self.value(table);
        let v = idx.mapv(|k| t[[row, k]]);
        let ng = self.ng(table);
        self.push(Cow::Owned(v), Op::GatherTable { table, row, idx }, ng)
    }

    /// Column-wise mean, producing a 1×n row.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let v = self.value(x).mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0));
        let ng = self.ng(x);
        self.push(Cow::Owned(v), Op::MeanRows(x), ng)
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().map(|v| v * v).sum::<f64>();
        let ng = self.ng(x);
        self.push(Cow::Owned(Array2::from_elem((1, 1), s)), Op::SumSquares(x), ng)
    }

    /// Scales each row to unit Euclidean norm. Callers must reject zero rows first.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let norms: Vec<f64> = xv.outer_iter().map(|r| r.dot(&r).sqrt()).collect();
        let mut v = xv.clone();
        for (mut row, n) in v.outer_iter_mut().zip(&norms) {
            row.mapv_inplace(|e| e / n);
        }
        let ng = self.ng(x);
        self.push(Cow::Owned(v), Op::L2NormalizeRows { x, norms }, ng)
    }

    /// `scale · Σ_i −log softmax(logits_i)[target_i]`, skipping rows whose target is `None`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>], scale: f64) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), targets.len(), "one target per logit row");
        let mut probs = lv.clone();
        let mut total = 0.0;
        for (i, mut row) in probs.outer_iter_mut().enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            if let Some(t) = targets[i] {
                total += lse - row[t];
            }
            row.mapv_inplace(|v| (v - lse).exp());
        }
        let ng = self.ng(logits);
        let out = Array2::from_elem((1, 1), scale * total);
        self.push(
            Cow::Owned(out),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs, scale },
            ng,
        )
    }

    /// Multiplies by a fixed 0/(1/keep) mask.
    pub fn dropout(&mut self, x: Var, mask: Array2<f64>) -> Var {
        let v = self.value(x) * &mask;
        let ng = self.ng(x);
        self.push(Cow::Owned(v), Op::Dropout { x, mask }, ng)
    }

    /// Weighted sum of same-shaped values.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        assert!(!terms.is_empty(), "weighted_sum of nothing");
        let mut v = self.value(terms[0].0) * terms[0].1;
        for (t, w) in &terms[1..] {
            v.scaled_add(*w, self.value(*t));
        }
        let ng = terms.iter().any(|(t, _)| self.ng(*t));
        self.push(Cow::Owned(v), Op::WeightedSum(terms.to_vec()), ng)
    }

    /// Back-propagates from a scalar output with seed gradient 1.
    pub fn backward(&self, output: Var) -> Gradients {
        self.backward_seeded(&[(output, Array2::from_elem((1, 1), 1.0))])
    }

    /// Back-propagates the given output gradients through the whole tape.
    pub fn backward_seeded(&self, seeds: &[(Var, Array2<f64>)]) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for (v, g) in seeds {
            accum(&mut grads, *v, g.clone());
            last = last.max(v.0);
        }
        let mut out = Gradients::default();

        for idx in (0..=last).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {}
                Op::Param(key) => out.accumulate(*key, &g),
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        accum(&mut grads, *a, g.dot(&self.value(*b).t()));
                    }
                    if self.ng(*b) {
                        accum(&mut grads, *b, self.value(*a).t().dot(&g));
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.ng(*a) {
                        accum(&mut grads, *a, g.dot(self.value(*b)));
                    }
                    if self.ng(*b) {
                        accum(&mut grads, *b, g.t().dot(self.value(*a)));
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*b) {
                        accum(&mut grads, *b, g.clone());
                    }
                    if self.ng(*a) {
                        accum(&mut grads, *a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.ng(*b) {
                        accum(&mut grads, *b, -&g);
                    }
                    if self.ng(*a) {
                        accum(&mut grads, *a, g);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.ng(*row) {
                        accum(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.ng(*a) {
                        accum(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.ng(*a) {
                        accum(&mut grads, *a, &g * self.value(*b));
                    }
                    if self.ng(*b) {
                        accum(&mut grads, *b, &g * self.value(*a));
                    }
                }
                Op::Scale(a, c) => accum(&mut grads, *a, g * *c),
                Op::Gelu(a) => {
                    let d = self.value(*a).mapv(gelu_grad);
                    accum(&mut grads, *a, g * d);
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    if self.ng(*gain) {
                        accum(&mut grads, *gain, (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.ng(*bias) {
                        accum(&mut grads, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.ng(*x) {
                        let dxhat = &g * self.value(*gain);
                        let d = dxhat.ncols() as f64;
                        let mut dx = Array2::zeros(dxhat.dim());
                        for i in 0..dxhat.nrows() {
                            let dr = dxhat.row(i);
                            let xr = xhat.row(i);
                            let mean_d = dr.sum() / d;
                            let mean_dx = dr.dot(&xr) / d;
                            for j in 0..dxhat.ncols() {
                                dx[[i, j]] = inv_std[i] * (dr[j] - mean_d - xr[j] * mean_dx);
                            }
                        }
                        accum(&mut grads, *x, dx);
                    }
                }
                Op::Softmax(x) => {
                    let p = &node.value;
                    let mut dx = &g * &**p;
                    for (mut row, prow) in dx.outer_iter_mut().zip(p.outer_iter()) {
                        let dot: f64 = row.sum();
                        row.zip_mut_with(&prow, |r, pv| *r -= pv * dot);
                    }
                    accum(&mut grads, *x, dx);
                }
                Op::SliceRows { x, start } => {
                    let mut full = Array2::zeros(self.shape(*x));
                    full.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    accum(&mut grads, *x, full);
                }
                Op::SliceCols { x, start } => {
                    let mut full = Array2::zeros(self.shape(*x));
                    full.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    accum(&mut grads, *x, full);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.shape(*p).0;
                        if self.ng(*p) {
                            accum(&mut grads, *p, g.slice(s![offset..offset + n, ..]).to_owned());
                        }
                        offset += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.shape(*p).1;
                        if self.ng(*p) {
                            accum(&mut grads, *p, g.slice(s![.., offset..offset + n]).to_owned());
                        }
                        offset += n;
                    }
                }
                Op::GatherRows { table, ids } => {
                    let mut dt = Array2::zeros(self.shape(*table));
                    for (i, &id) in ids.iter().enumerate() {
                        let mut r = dt.row_mut(id);
                        r += &g.row(i);
                    }
                    accum(&mut grads, *table, dt);
                }
                Op::GatherTable { table, row, idx } => {
                    let mut dt = Array2::zeros(self.shape(*table));
                    for ((i, j), &k) in idx.indexed_iter() {
                        dt[[*row, k]] += g[[i, j]];
                    }
                    accum(&mut grads, *table, dt);
                }
                Op::MeanRows(x) => {
                    let (n, d) = self.shape(*x);
                    let row = g.row(0).to_owned() / n as f64;
                    let dx = row.broadcast((n, d)).expect("broadcast").to_owned();
                    accum(&mut grads, *x, dx);
                }
                Op::SumSquares(x) => {
                    let c = 2.0 * g[[0, 0]];
                    accum(&mut grads, *x, self.value(*x) * c);
                }
                Op::L2NormalizeRows { x, norms } => {
                    let y = &node.value;
                    let mut dx = g.clone();
                    for i in 0..dx.nrows() {
                        let dot = y.row(i).dot(&g.row(i));
                        for j in 0..dx.ncols() {
                            dx[[i, j]] = (g[[i, j]] - y[[i, j]] * dot) / norms[i];
                        }
                    }
                    accum(&mut grads, *x, dx);
                }
                Op::CrossEntropy { logits, targets, probs, scale } => {
                    let c = g[[0, 0]] * scale;
                    let mut dl = Array2::zeros(probs.dim());
                    for (i, t) in targets.iter().enumerate() {
                        if let Some(t) = t {
                            let mut r = dl.row_mut(i);
                            r.assign(&probs.row(i));
                            r[*t] -= 1.0;
                            r *= c;
                        }
                    }
                    accum(&mut grads, *logits, dl);
                }
                Op::Dropout { x, mask } => accum(&mut grads, *x, g * mask),
                Op::WeightedSum(terms) => {
                    for (t, w) in terms {
                        if self.ng(*t) {
                            accum(&mut grads, *t, &g * *w);
                        }
                    }
                }
            }
        }
        out
    }
}

fn accum(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

/// A parameter store bound for one forward pass.
#[derive(Clone, Copy)]
pub struct Scope<'p> {
    pub store: &'p ParamStore,
    pub id: StoreId,
    pub trainable: bool,
}

impl<'p> Scope<'p> {
    pub fn trainable(store: &'p ParamStore, id: StoreId) -> Self {
        Self { store, id, trainable: true }
    }

    pub fn frozen(store: &'p ParamStore, id: StoreId) -> Self {
        Self { store, id, trainable: false }
    }
}
