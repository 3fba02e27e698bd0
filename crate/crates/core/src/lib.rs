//! Speech recognition and translation with a frozen speech encoder, a
//! Q-Former adapter and a decoder-only language model trained in three
//! stages (ASR, SMT, SRT).

pub mod adapter;
pub mod audio;
pub mod container;
pub mod curriculum;
pub mod datasets;
pub mod decoding;
pub mod error;
pub mod lm;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod registry;
pub mod task;
pub mod tensor;

pub use error::{Error, Result};
