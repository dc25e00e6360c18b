//! Dense tensors and reverse-mode differentiation.
//!
//! The operator set is exactly what the classifiers need: stride-1
//! convolution, 2×2 max pooling, linear layers, pointwise activations,
//! softmax cross-entropy, and a handful of reshaping/temporal ops.

pub mod gradcheck;
pub mod kernels;
mod params;
pub mod serialize;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_point, GradCheckOptions, GradCheckReport};
pub use kernels::temporal_shift;
pub use params::{ParamId, Params};
pub use tape::{Activation, DecisionLog, Gradients, Tape, Var};
pub use tensor::{Scalar, Tensor};
