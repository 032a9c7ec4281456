//! Minimal dense-tensor engine with reverse-mode differentiation.
//!
//! Values are row-major `f64` tensors. Models record primitives on a
//! [`Tape`], call [`Tape::backward`] on a scalar loss and hand the resulting
//! [`Gradients`] to an optimizer such as [`Adam`].

mod activation;
mod error;
pub mod nn;
mod optim;
mod params;
mod tape;
mod tensor;

pub use activation::{Activation, LEAKY_RELU_SLOPE};
pub use error::{Result, TensorError};
pub use optim::{Adam, AdamConfig};
pub use params::{Gradients, Param, ParamId, ParamStore};
pub use tape::{Index, Tape, Var};
pub use tensor::Tensor;
