//! Reverse-mode autodiff over dense f64 tensors.
//!
//! Deliberately small: exactly the operations needed to express the speaker
//! attention and representation networks and their losses. No broadcasting
//! rules, no higher-order gradients, no implicit type promotion — every op
//! states its shapes and validates them eagerly.

mod gradcheck;
mod graph;
pub(crate) mod linalg;
mod params;
mod tensor;

pub use gradcheck::grad_check;
pub use graph::{Gradients, Graph, NodeId, NORM_EPS};
pub use params::{init, Binding, ParamSet, Parameter};
pub use tensor::Tensor;
