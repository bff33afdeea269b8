//! Reverse-mode differentiable numerics: a dense [`Tensor`], a recording
//! [`Tape`] with the primitives the detector needs, SGD with momentum, and a
//! finite-difference gradient checker.

mod gradcheck;
mod optim;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, rel_err, GradCheckOptions, GradCheckReport};
pub use optim::OptimizerState;
pub use tape::{softmax, window_out, Gradients, Tape, Var};
pub use tensor::{DType, Float, Tensor};
