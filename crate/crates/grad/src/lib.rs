//! Reverse-mode automatic differentiation over dense NCHW tensors.
//!
//! A [`Graph`] records operations as they are evaluated; [`Graph::backward`]
//! sweeps the tape in reverse from a scalar root. Parameters live in a
//! [`ParamStore`] and are copied into each graph with [`ParamStore::bind`].

mod conv;
mod error;
mod graph;
mod loss;
mod norm;
mod shape;

pub mod container;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod tensor;

pub use conv::ConvSpec;
pub use error::{GradError, Result};
pub use gradcheck::{gradient_check, GradCheckConfig, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use loss::lovasz_grad;
pub use norm::INSTANCE_NORM_EPS;
pub use optim::{adam_step, Adam, AdamConfig};
pub use params::{Bound, Init, Param, ParamId, ParamStore};
pub use tensor::{Float, Tensor};
