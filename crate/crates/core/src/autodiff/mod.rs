//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! Parameters live in a [`ParamStore`]; each forward pass binds them into a
//! fresh [`Graph`] through a [`Session`], and [`Adam`] applies the resulting
//! gradients. All arithmetic is double precision.

mod adam;
mod conv;
mod gemm;
pub mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use graph::{Gradients, Graph, Var, BCE_EPS};
pub use params::{accumulate_grads, ParamGrad, ParamId, ParamStore, Session};
pub use tensor::Tensor;
