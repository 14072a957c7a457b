//! Trainable 3D Gabor-parametric convolution kernels, a Pearson's
//! correlation segmentation loss, and a small V-Net-style volumetric
//! segmentation stack with its own reverse-mode autodiff engine.

pub mod autodiff;
pub mod error;
pub mod gabor;
pub mod gradcheck;
pub mod harness;
pub mod io;
pub mod losses;
pub mod scalar;
pub mod segnet;
pub mod tensor;

pub use autodiff::{finite_diff_grad, max_rel_error, Graph, Padding, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// 64-bit tensor, the working precision for training and gradient checks.
pub type Tensor64 = Tensor<f64>;
/// 32-bit tensor, used for compact file storage.
pub type Tensor32 = Tensor<f32>;
/// Graph over the working precision.
pub type Graph64 = Graph<f64>;
