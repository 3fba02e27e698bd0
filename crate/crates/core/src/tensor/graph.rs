use std::collections::HashMap;

use ndarray::{concatenate, s, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::ops::{self, Mask};
use super::{Matrix, ParamId, ParamMask, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Normalize(Var, Vec<f64>),
    Softmax(Var),
    Gather(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Dropout(Var, Matrix),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Matrix,
        count: usize,
    },
    Mean(Vec<Var>),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// A single-use tape. Parameters are read from the store when first touched;
/// only parameters in the mask (if any) are differentiated.
pub struct Graph<'s> {
    store: &'s ParamStore,
    trainable: Option<&'s ParamMask>,
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    rng: Option<ChaCha8Rng>,
}

impl<'s> Graph<'s> {
    /// Forward-only graph: nothing requires gradients, dropout is disabled.
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            trainable: None,
            nodes: Vec::with_capacity(256),
            params: HashMap::new(),
            rng: None,
        }
    }

    pub fn with_trainable(store: &'s ParamStore, trainable: &'s ParamMask) -> Self {
        let mut g = Self::new(store);
        g.trainable = Some(trainable);
        g
    }

    /// Enables dropout, drawing masks from `rng`.
    pub fn with_dropout_rng(mut self, rng: ChaCha8Rng) -> Self {
        self.rng = Some(rng);
        self
    }

    pub fn take_rng(&mut self) -> Option<ChaCha8Rng> {
        self.rng.take()
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let needs = self.trainable.is_some_and(|m| m.contains(id));
        let v = self.push(self.store.get(id).clone(), Op::Leaf, needs);
        self.params.insert(id, v);
        v
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked (used to differentiate w.r.t. inputs).
    pub fn input(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMulT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let mut v = self.value(x).clone();
        ops::add_row(&mut v, self.value(row));
        let ng = self.ng(x) || self.ng(row);
        self.push(v, Op::AddRow(x, row), ng)
    }

    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let v = self.value(x) * &self.value(row).row(0);
        let ng = self.ng(x) || self.ng(row);
        self.push(v, Op::MulRow(x, row), ng)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x) * c;
        let ng = self.ng(x);
        self.push(v, Op::Scale(x, c), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        ops::relu_inplace(&mut v);
        let ng = self.ng(x);
        self.push(v, Op::Relu(x), ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        ops::gelu_inplace(&mut v);
        let ng = self.ng(x);
        self.push(v, Op::Gelu(x), ng)
    }

    /// Row standardisation without the affine part of layer norm.
    pub fn normalize(&mut self, x: Var) -> Var {
        let (v, inv) = ops::normalize_rows(self.value(x));
        let ng = self.ng(x);
        self.push(v, Op::Normalize(x, inv), ng)
    }

    pub fn softmax(&mut self, x: Var, mask: Mask) -> Var {
        let v = ops::softmax_rows(self.value(x), mask);
        let ng = self.ng(x);
        self.push(v, Op::Softmax(x), ng)
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let v = t.select(Axis(0), ids);
        let ng = self.ng(table);
        self.push(v, Op::Gather(table, ids.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        if parts.len() == 1 {
            return parts[0];
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        if parts.len() == 1 {
            return parts[0];
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).slice(s![start..start + len, ..]).to_owned();
        let ng = self.ng(x);
        self.push(v, Op::SliceRows(x, start), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).slice(s![.., start..start + len]).to_owned();
        let ng = self.ng(x);
        self.push(v, Op::SliceCols(x, start), ng)
    }

    /// Inverted dropout; identity when the graph has no RNG or `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        let Some(rng) = self.rng.as_mut() else {
            return x;
        };
        if p <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let (r, c) = self.nodes[x.0].value.dim();
        let mask = Matrix::from_shape_fn((r, c), |_| {
            if rng.random::<f64>() < p {
                0.0
            } else {
                keep
            }
        });
        let v = self.value(x) * &mask;
        let ng = self.ng(x);
        self.push(v, Op::Dropout(x, mask), ng)
    }

    /// Mean token cross-entropy over rows whose target is `Some`; other rows
    /// do not contribute.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), targets.len(), "cross_entropy: row/target mismatch");
        let mut probs = Matrix::zeros(lv.dim());
        let mut total = 0.0;
        let mut count = 0;
        for (i, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            let row = lv.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let lse = sum.ln() + m;
            for (j, &v) in row.iter().enumerate() {
                probs[[i, j]] = (v - lse).exp();
            }
            total += lse - row[t];
            count += 1;
        }
        let loss = if count > 0 { total / count as f64 } else { 0.0 };
        let ng = self.ng(logits);
        self.push(
            Matrix::from_elem((1, 1), loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            ng,
        )
    }

    pub fn mean(&mut self, scalars: &[Var]) -> Var {
        let n = scalars.len().max(1) as f64;
        let v = scalars.iter().map(|&s| self.scalar(s)).sum::<f64>() / n;
        let ng = scalars.iter().any(|&s| self.ng(s));
        self.push(Matrix::from_elem((1, 1), v), Op::Mean(scalars.to_vec()), ng)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Matrix>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::ones(self.value(loss).dim()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.propagate(node, &gy, &mut grads);
            grads[i] = Some(gy);
        }

        let params = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        Grads { grads, params }
    }

    fn propagate(&self, node: &Node, gy: &Matrix, grads: &mut [Option<Matrix>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    acc(grads, *a, gy.dot(&val(*b).t()));
                }
                if self.ng(*b) {
                    acc(grads, *b, val(*a).t().dot(gy));
                }
            }
            Op::MatMulT(a, b) => {
                if self.ng(*a) {
                    acc(grads, *a, gy.dot(val(*b)));
                }
                if self.ng(*b) {
                    acc(grads, *b, gy.t().dot(val(*a)));
                }
            }
            Op::Add(a, b) => {
                if self.ng(*a) {
                    acc(grads, *a, gy.clone());
                }
                if self.ng(*b) {
                    acc(grads, *b, gy.clone());
                }
            }
            Op::AddRow(x, r) => {
                if self.ng(*x) {
                    acc(grads, *x, gy.clone());
                }
                if self.ng(*r) {
                    acc(grads, *r, ops::sum_rows(gy));
                }
            }
            Op::MulRow(x, r) => {
                if self.ng(*x) {
                    acc(grads, *x, gy * &val(*r).row(0));
                }
                if self.ng(*r) {
                    acc(grads, *r, ops::sum_rows(&(gy * val(*x))));
                }
            }
            Op::Scale(x, c) => acc(grads, *x, gy * *c),
            Op::Relu(x) => {
                let mut g = gy.clone();
                ndarray::Zip::from(&mut g)
                    .and(val(*x))
                    .for_each(|g, &x| {
                        if x <= 0.0 {
                            *g = 0.0
                        }
                    });
                acc(grads, *x, g);
            }
            Op::Gelu(x) => {
                let mut g = gy.clone();
                ndarray::Zip::from(&mut g)
                    .and(val(*x))
                    .for_each(|g, &x| *g *= ops::gelu_grad(x));
                acc(grads, *x, g);
            }
            Op::Normalize(x, inv) => {
                let y = &node.value;
                let cols = y.ncols() as f64;
                let mut g = Matrix::zeros(y.dim());
                for (r, ((gyr, yr), mut gr)) in gy
                    .rows()
                    .into_iter()
                    .zip(y.rows())
                    .zip(g.rows_mut())
                    .enumerate()
                {
                    let mean_g = gyr.sum() / cols;
                    let mean_gy = gyr.iter().zip(yr.iter()).map(|(a, b)| a * b).sum::<f64>() / cols;
                    for j in 0..gr.len() {
                        gr[j] = inv[r] * (gyr[j] - mean_g - yr[j] * mean_gy);
                    }
                }
                acc(grads, *x, g);
            }
            Op::Softmax(x) => {
                let p = &node.value;
                let mut g = Matrix::zeros(p.dim());
                for ((gyr, pr), mut gr) in gy.rows().into_iter().zip(p.rows()).zip(g.rows_mut()) {
                    let dot: f64 = gyr.iter().zip(pr.iter()).map(|(a, b)| a * b).sum();
                    for j in 0..gr.len() {
                        gr[j] = pr[j] * (gyr[j] - dot);
                    }
                }
                acc(grads, *x, g);
            }
            Op::Gather(table, ids) => {
                let mut g = Matrix::zeros(val(*table).dim());
                for (r, &id) in ids.iter().enumerate() {
                    let mut row = g.row_mut(id);
                    row += &gy.row(r);
                }
                acc(grads, *table, g);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = val(p).nrows();
                    if self.ng(p) {
                        acc(grads, p, gy.slice(s![start..start + rows, ..]).to_owned());
                    }
                    start += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let cols = val(p).ncols();
                    if self.ng(p) {
                        acc(grads, p, gy.slice(s![.., start..start + cols]).to_owned());
                    }
                    start += cols;
                }
            }
            Op::SliceRows(x, start) => {
                let mut g = Matrix::zeros(val(*x).dim());
                g.slice_mut(s![*start..*start + gy.nrows(), ..]).assign(gy);
                acc(grads, *x, g);
            }
            Op::SliceCols(x, start) => {
                let mut g = Matrix::zeros(val(*x).dim());
                g.slice_mut(s![.., *start..*start + gy.ncols()]).assign(gy);
                acc(grads, *x, g);
            }
            Op::Dropout(x, mask) => acc(grads, *x, gy * mask),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let scale = gy[[0, 0]] / (*count).max(1) as f64;
                let mut g = Matrix::zeros(probs.dim());
                for (i, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    let mut row = g.row_mut(i);
                    row.assign(&probs.row(i));
                    row[t] -= 1.0;
                    row *= scale;
                }
                acc(grads, *logits, g);
            }
            Op::Mean(parts) => {
                let g = gy[[0, 0]] / parts.len().max(1) as f64;
                for &p in parts {
                    if self.ng(p) {
                        acc(grads, p, Matrix::from_elem((1, 1), g));
                    }
                }
            }
        }
    }
}

fn acc(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(cur) => *cur += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads {
    grads: Vec<Option<Matrix>>,
    params: Vec<(ParamId, Var)>,
}

impl Grads {
    pub fn var(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for a parameter; `None` if it was frozen or untouched.
    pub fn param(&self, id: ParamId) -> Option<&Matrix> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.var(*v))
    }

    pub fn into_params(mut self) -> Vec<(ParamId, Matrix)> {
        let mut out: Vec<(ParamId, Matrix)> = self
            .params
            .iter()
            .filter_map(|&(id, v)| self.grads[v.0].take().map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}
