//! Minimal f64 reverse-mode automatic differentiation.
//!
//! A [`Tape`] records eagerly evaluated operations; [`Tape::backward`] returns
//! gradients for any recorded value and for every trainable [`ParamStore`]
//! parameter that took part in the computation.

mod error;
pub mod nn;
pub mod optim;
mod params;
mod tape;
mod tensor;

pub use error::{GradError, Result};
pub use params::{ParamId, ParamStore};
pub use tape::{softplus, Gradients, Tape, Var};
pub use tensor::Tensor;
