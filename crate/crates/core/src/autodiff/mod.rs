//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Everything differentiable in this crate runs through a [`Tape`]. All
//! arithmetic is 64-bit and deterministic: identical inputs give bit-identical
//! forward values and gradients regardless of the parallel dispatch mode.

mod adam;
mod checkpoint;
mod conv;
pub mod kernels;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig, BoundParams, ParamStore};
pub use checkpoint::{load_checkpoint, save_checkpoint, validate_against};
pub use conv::conv2d;
pub use tape::{Binary, CustomGrad, Reduce, Tape, Unary, Var};
pub use tensor::Tensor;
