//! A small decoder-only transformer that can think in continuous latent
//! tokens: its own final hidden states fed back as input embeddings.

// `!(x > 0.0)` is how NaN gets rejected along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod cli;
pub mod error;
pub mod eval;
pub mod model;
pub mod rl;
pub mod runlog;
pub mod scalar;
pub mod taskgen;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = autodiff::Tensor<f64>;
pub type Tensor32 = autodiff::Tensor<f32>;
pub type Parameters = autodiff::ParamStore<f64>;
pub type Model = model::Model<f64>;
pub type Model32 = model::Model<f32>;
