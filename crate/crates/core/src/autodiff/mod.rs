//! Minimal reverse-mode automatic differentiation.
//!
//! Values live on a [`Tape`]; learnable parameters live in a [`ParamStore`] and
//! are copied onto the tape with [`Tape::param`]. After [`Tape::backward`],
//! [`Gradients::accumulate_into`] deposits parameter gradients into the store.

pub mod checkpoint;
mod kernels;
pub mod params;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use checkpoint::{load_params, load_params_into, save_params};
pub use params::{Param, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tape::{BatchNormOpts, Gradients, Tape, Var};
pub use tensor::Tensor;
