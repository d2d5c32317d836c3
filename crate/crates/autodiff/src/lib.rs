//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records ops on [`Var`] nodes. [`Graph::grad`] runs the reverse
//! sweep; with [`GradOptions::create_graph`] the resulting gradients are graph
//! nodes themselves, so they can be differentiated again. That second pass is
//! how Hessian-vector products and meta-gradients are computed.
//!
//! Everything is generic over [`Scalar`] (`f64` or `f32`).

mod backward;
mod composite;
mod error;
mod grad_vector;
mod graph;
pub mod memory;
mod scalar;
mod tensor;

pub use backward::GradOptions;
pub use composite::softmax_tensor;
pub use error::{Error, Result};
pub use grad_vector::{GradVector, Layout, LayoutEntry, ParamSet};
pub use graph::{Graph, NoGradGuard, Var};
pub use scalar::Scalar;
pub use tensor::{broadcast_shape, numel, Tensor};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Graph64 = Graph<f64>;
pub type Graph32 = Graph<f32>;
pub type Var64 = Var<f64>;
pub type Var32 = Var<f32>;
pub type GradVector64 = GradVector<f64>;
pub type GradVector32 = GradVector<f32>;
