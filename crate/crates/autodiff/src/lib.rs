//! Minimal reverse-mode automatic differentiation over dense row-major
//! tensors, with the initialiser, optimiser and gradient checker used by the
//! sequence models.

pub mod adam;
pub mod blob;
mod catalog;
mod error;
pub mod gradcheck;
mod graph;
mod params;
mod scalar;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use catalog::{primitive_set, Primitive};
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_params, grad_check_train};
pub use graph::{add_all, concat, Gradients, Graph, Var};
pub use params::{derive_seed, xavier_init, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;
