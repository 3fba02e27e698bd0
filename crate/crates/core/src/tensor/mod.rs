//! Dense matrices, a named parameter store and a reverse-mode autodiff tape.
//!
//! Everything is computed in `f64`; parameters are kept at `f32` precision so
//! checkpoints round-trip losslessly.

mod graph;
pub mod init;
pub mod ops;
mod params;

pub use graph::{Grads, Graph, Var};
pub use params::{ParamId, ParamMask, ParamStore};

pub type Matrix = ndarray::Array2<f64>;

/// Rounds every element to the nearest `f32`.
pub fn round_to_f32(m: &mut Matrix) {
    m.mapv_inplace(|x| x as f32 as f64);
}
