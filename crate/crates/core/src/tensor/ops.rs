//! Straight-line matrix kernels shared by the autodiff tape and the
//! inference paths.

use ndarray::{Axis, Zip};

use super::Matrix;

pub const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Which keys each query row may attend to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mask {
    None,
    /// Row `i` sees columns `0..=i + offset`.
    Causal { offset: usize },
}

impl Mask {
    #[inline]
    pub fn limit(self, row: usize, cols: usize) -> usize {
        match self {
            Mask::None => cols,
            Mask::Causal { offset } => (row + offset + 1).min(cols),
        }
    }
}

/// Row-wise standardisation; returns the normalised matrix and each row's 1/std.
pub fn normalize_rows(x: &Matrix) -> (Matrix, Vec<f64>) {
    let cols = x.ncols() as f64;
    let mut out = x.clone();
    let mut inv = Vec::with_capacity(x.nrows());
    for mut row in out.rows_mut() {
        let mean = row.sum() / cols;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols;
        let s = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) * s);
        inv.push(s);
    }
    (out, inv)
}

pub fn layer_norm(x: &Matrix, gamma: &Matrix, beta: &Matrix) -> Matrix {
    let (mut y, _) = normalize_rows(x);
    y *= gamma;
    y += beta;
    y
}

#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Row softmax honouring `mask`; masked entries come out as exactly zero.
pub fn softmax_rows(x: &Matrix, mask: Mask) -> Matrix {
    let cols = x.ncols();
    let mut out = Matrix::zeros(x.dim());
    for (i, (src, mut dst)) in x.rows().into_iter().zip(out.rows_mut()).enumerate() {
        let lim = mask.limit(i, cols);
        if lim == 0 {
            continue;
        }
        let m = src.iter().take(lim).cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..lim {
            let e = (src[j] - m).exp();
            dst[j] = e;
            sum += e;
        }
        for j in 0..lim {
            dst[j] /= sum;
        }
    }
    out
}

/// Log-softmax of a single row of logits.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
    row.iter().map(|v| v - lse).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn add_row(x: &mut Matrix, row: &Matrix) {
    debug_assert_eq!(row.nrows(), 1);
    *x += &row.row(0);
}

pub fn sum_rows(x: &Matrix) -> Matrix {
    x.sum_axis(Axis(0)).insert_axis(Axis(0))
}

pub fn relu_inplace(x: &mut Matrix) {
    x.mapv_inplace(|v| v.max(0.0));
}

pub fn gelu_inplace(x: &mut Matrix) {
    x.mapv_inplace(gelu);
}

/// `a += b ⊙ c`
pub fn add_product(a: &mut Matrix, b: &Matrix, c: &Matrix) {
    Zip::from(a).and(b).and(c).for_each(|a, &b, &c| *a += b * c);
}
