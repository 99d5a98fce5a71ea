//! Differentiable arrays: tensors, kernels, the autodiff tape and gradient checks.

pub mod conv;
pub mod gradcheck;
pub mod norm;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_subset, GradCheckConfig, GradCheckReport};
pub use norm::{ChannelMode, NormKind};
pub use tape::{softplus, Gradients, Tape, Var};
pub use tensor::{Scalar, Tensor};
