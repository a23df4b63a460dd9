//! Minimal dense-tensor engine: tensors, reverse-mode differentiation,
//! masked softmax, finite-difference checks and parameter checkpoints.

pub mod checkpoint;
mod gradcheck;
mod graph;
pub mod kernels;
mod mask;
mod params;
mod scalar;
mod tensor;

pub use gradcheck::{gradient_check, relative_error, GradCheckReport, GradSample, LossBuilder, SCALE_FLOOR};
pub use graph::{masked_softmax, Gradients, Graph, Var};
pub use mask::AttnMask;
pub use params::{ParamId, ParamStore};
pub use scalar::{Precision, Scalar};
pub use tensor::Tensor;
