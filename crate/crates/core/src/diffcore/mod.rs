//! Tensors, a tape-based reverse-mode autodiff engine and the network
//! primitives built on it.

pub mod gradcheck;
mod image;
pub mod init;
mod ops;
mod params;
mod tape;
mod tensor;

pub use image::ImageRGB;
pub use ops::{avgpool_tensor, Padding, COSINE_DENOM_FLOOR};
pub use params::{Bound, Conv2d, Linear, Param, ParamId, ParamSet};
pub use tape::{BackwardOp, Tape, Var};
pub use tensor::{MatMut, MatRef, Scalar, Tensor};
