//! Transformer building blocks, each with a taped forward (`forward`) for
//! training and a plain forward (`apply`) for inference.

use ndarray::{concatenate, s, ArrayView1, ArrayViewMut1, Axis};
use rand::Rng;

use crate::tensor::ops::{self, Mask};
use crate::tensor::{init, Graph, Matrix, ParamId, ParamStore, Var};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        Self::with_std(store, name, d_in, d_out, bias, INIT_STD, rng)
    }

    pub fn with_std(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(format!("{name}.weight"), init::trunc_normal(d_in, d_out, std, rng));
        let b = bias.then(|| store.add(format!("{name}.bias"), init::zeros(1, d_out)));
        Self { w, b, d_in, d_out }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }

    pub fn apply(&self, store: &ParamStore, x: &Matrix) -> Matrix {
        let mut y = x.dot(store.get(self.w));
        if let Some(b) = self.b {
            ops::add_row(&mut y, store.get(b));
        }
        y
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.weight"), init::ones(1, d)),
            beta: store.add(format!("{name}.bias"), init::zeros(1, d)),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let n = g.normalize(x);
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        let y = g.mul_row(n, gamma);
        g.add_row(y, beta)
    }

    pub fn apply(&self, store: &ParamStore, x: &Matrix) -> Matrix {
        ops::layer_norm(x, store.get(self.gamma), store.get(self.beta))
    }
}

/// Low-rank update `scale · dropout(x)·A·B` added to a frozen projection.
#[derive(Debug, Clone)]
pub struct LoraDelta {
    pub a: ParamId,
    pub b: ParamId,
    pub scale: f64,
    pub dropout: f64,
}

impl LoraDelta {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let x = g.dropout(x, self.dropout);
        let a = g.param(self.a);
        let b = g.param(self.b);
        let xa = g.matmul(x, a);
        let d = g.matmul(xa, b);
        g.scale(d, self.scale)
    }

    pub fn apply(&self, store: &ParamStore, x: &Matrix) -> Matrix {
        x.dot(store.get(self.a)).dot(store.get(self.b)) * self.scale
    }
}

/// A linear projection that may carry a LoRA delta.
#[derive(Debug, Clone)]
pub struct Projection {
    pub base: Linear,
    pub lora: Option<LoraDelta>,
}

impl Projection {
    pub fn new(base: Linear) -> Self {
        Self { base, lora: None }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let y = self.base.forward(g, x);
        match &self.lora {
            Some(l) => {
                let d = l.forward(g, x);
                g.add(y, d)
            }
            None => y,
        }
    }

    pub fn apply(&self, store: &ParamStore, x: &Matrix) -> Matrix {
        let mut y = self.base.apply(store, x);
        if let Some(l) = &self.lora {
            y += &l.apply(store, x);
        }
        y
    }
}

/// Multi-head attention with separate q/k/v/o projections.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Projection,
    pub k: Projection,
    pub v: Projection,
    pub o: Projection,
    pub n_heads: usize,
    pub d_model: usize,
}

impl Attention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        d_kv_in: usize,
        n_heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(d_model % n_heads == 0, "width {d_model} not divisible by {n_heads} heads");
        let mut proj = |p: &str, d_in: usize| {
            Projection::new(Linear::new(store, &format!("{name}.{p}"), d_in, d_model, true, rng))
        };
        let q = proj("q", d_model);
        let k = proj("k", d_kv_in);
        let v = proj("v", d_kv_in);
        let o = proj("o", d_model);
        Self {
            q,
            k,
            v,
            o,
            n_heads,
            d_model,
        }
    }

    pub fn forward(&self, g: &mut Graph, xq: Var, xkv: Var, mask: Mask) -> Var {
        let q = self.q.forward(g, xq);
        let k = self.k.forward(g, xkv);
        let v = self.v.forward(g, xkv);
        let dh = self.d_model / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let s = g.matmul_t(qh, kh);
            let s = g.scale(s, scale);
            let p = g.softmax(s, mask);
            heads.push(g.matmul(p, vh));
        }
        let o = g.concat_cols(&heads);
        self.o.forward(g, o)
    }

    pub fn apply(&self, store: &ParamStore, xq: &Matrix, xkv: &Matrix, mask: Mask) -> Matrix {
        let q = self.q.apply(store, xq);
        let k = self.k.apply(store, xkv);
        let v = self.v.apply(store, xkv);
        let o = attend(&q, &k, &v, self.n_heads, mask);
        self.o.apply(store, &o)
    }
}

/// Scaled dot-product attention over already projected q/k/v, head by head.
pub fn attend(q: &Matrix, k: &Matrix, v: &Matrix, n_heads: usize, mask: Mask) -> Matrix {
    let d = q.ncols();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let heads: Vec<Matrix> = (0..n_heads)
        .map(|h| {
            let cols = s![.., h * dh..(h + 1) * dh];
            let scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            ops::softmax_rows(&scores, mask).dot(&v.slice(cols))
        })
        .collect();
    let views: Vec<_> = heads.iter().map(|h| h.view()).collect();
    concatenate(Axis(1), &views).expect("head widths agree")
}

/// `attend` for a single query row that may see every key, written into
/// `out` without intermediate matrices.
pub fn attend_row(q: ArrayView1<f64>, k: &Matrix, v: &Matrix, n_heads: usize, mut out: ArrayViewMut1<f64>) {
    let dh = q.len() / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut w = vec![0.0; k.nrows()];
    for h in 0..n_heads {
        let cols = s![h * dh..(h + 1) * dh];
        let qh = q.slice(cols);
        let mut m = f64::NEG_INFINITY;
        for (wt, kt) in w.iter_mut().zip(k.rows()) {
            *wt = kt.slice(cols).dot(&qh) * scale;
            m = m.max(*wt);
        }
        let mut sum = 0.0;
        for wt in w.iter_mut() {
            *wt = (*wt - m).exp();
            sum += *wt;
        }
        let mut oh = out.slice_mut(cols);
        oh.fill(0.0);
        for (wt, vt) in w.iter().zip(v.rows()) {
            oh.scaled_add(wt / sum, &vt.slice(cols));
        }
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), d, hidden, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, d, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.fc1.forward(g, x);
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }

    pub fn apply(&self, store: &ParamStore, x: &Matrix) -> Matrix {
        let mut h = self.fc1.apply(store, x);
        ops::gelu_inplace(&mut h);
        self.fc2.apply(store, &h)
    }
}

/// Sinusoidal position table (`n × d`).
pub fn sinusoids(n: usize, d: usize) -> Matrix {
    let half = d / 2;
    Matrix::from_shape_fn((n, d), |(p, j)| {
        let i = if j < half { j } else { j - half };
        let freq = (-(10_000f64.ln()) * (2 * i) as f64 / d as f64).exp();
        let a = p as f64 * freq;
        if j < half {
            a.sin()
        } else {
            a.cos()
        }
    })
}
