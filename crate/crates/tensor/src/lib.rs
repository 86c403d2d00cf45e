//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Graph`] records one forward pass over values held in a [`ParamStore`]
//! and constants; [`Graph::backward`] then accumulates exact first-order
//! gradients into the store, and [`AdamW`] applies an update.

mod error;
mod graph;
mod kernels;
mod ops;
mod optim;
mod param;
mod tensor;

pub mod checkpoint;
pub mod gradcheck;
pub mod rng;
pub mod suite;

pub use error::{Result, TensorError};
pub use graph::{Fault, Graph, Var};
pub use ops::{ctc_min_frames, Conv1dAttrs, Primitive};
pub use optim::AdamW;
pub use param::{Init, ParamId, ParamStore, Parameter, Precision};
pub use tensor::Tensor;
