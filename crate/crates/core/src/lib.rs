//! Sequence classifiers for tri-axial accelerometer windows: LSTM variants,
//! a 1D CNN and an MLP, implemented from scratch in double precision, with the
//! windowing pipeline, a synthetic two-gear signal generator and a
//! reproducible training and experiment harness.

pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kv;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
