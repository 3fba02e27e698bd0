use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{round_to_f32, Matrix};

/// Normal(0, std) truncated at two standard deviations, rounded to f32.
pub fn trunc_normal(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Matrix {
    let mut m = Matrix::from_shape_fn((rows, cols), |_| loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break z * std;
        }
    });
    round_to_f32(&mut m);
    m
}

pub fn zeros(rows: usize, cols: usize) -> Matrix {
    Matrix::zeros((rows, cols))
}

pub fn ones(rows: usize, cols: usize) -> Matrix {
    Matrix::ones((rows, cols))
}
