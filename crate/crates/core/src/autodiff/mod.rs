//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records eagerly evaluated ops against a borrowed
//! [`ParamStore`]; [`Graph::backward`] returns [`Gradients`] that an
//! [`AdamState`] applies to the store once the graph is dropped.

mod adam;
mod gradcheck;
mod graph;
pub mod kernels;
pub mod layers;
mod params;
pub mod suite;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, ParamCheck};
pub use graph::{Gradients, Graph, Var};
pub use params::{init, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

pub(crate) use graph::{sigmoid, softmax_into};
