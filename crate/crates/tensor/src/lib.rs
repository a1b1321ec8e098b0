//! Dense row-major tensors with a reverse-mode tape and an Adam optimizer.
//!
//! Everything here is generic over [`Element`] so the same graph can be run in
//! `f32` for training and in `f64` when checking gradients against finite
//! differences.

mod adam;
mod conv;
mod element;
mod error;
pub mod gradcheck;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use conv::{conv_output_len, same_padding};
pub use element::Element;
pub use error::{Result, TensorError};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
