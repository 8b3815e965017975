//! Minimal dense tensor engine for the RESTC recommender.
//!
//! - [`Tensor`]: row-major `f64` storage with a shape.
//! - [`Tape`]: eager forward evaluation with reverse-mode gradients.
//! - [`ParamStore`] and [`Adam`]: named trainable parameters and their optimizer.
//! - [`CsrMatrix`]: constant sparse operand for graph propagation.

mod error;
mod optim;
mod params;
mod sparse;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use optim::Adam;
pub use params::{Bindings, Param, ParamId, ParamStore};
pub use sparse::CsrMatrix;
pub use tape::{Activation, Tape, Var, DEFAULT_LEAKY_SLOPE, NORM_FLOOR};
pub use tensor::Tensor;
