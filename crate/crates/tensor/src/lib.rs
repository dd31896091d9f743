//! Dense tensors with a reverse-mode gradient tape.
//!
//! Everything the AUV networks need lives here: a small set of differentiable
//! ops recorded on a [`Tape`], the [`Adam`] optimizer, named parameter
//! storage, and the `AUVN` checkpoint format. Values are generic over
//! [`Scalar`] so the same graph can be trained in `f32` and gradient-checked in
//! `f64`.

pub mod adam;
pub mod checkpoint;
mod error;
pub mod gradcheck;
pub mod params;
mod scalar;
mod tape;
mod tensor;

pub use adam::{clip_grad_norm, Adam, AdamConfig};
pub use checkpoint::Checkpoint;
pub use error::{Result, TensorError};
pub use params::{BoundParams, NamedGrads, ParamStore};
pub use scalar::Scalar;
pub use tape::{ConvSpec, Gradients, Tape, Var};
pub use tensor::Tensor;
