//! Dense float64 tensors, a reverse-mode tape, and gradient checking.

mod dropout;
mod gradcheck;
pub mod math;
mod rng;
mod tape;
mod tensor;

pub use dropout::dropout_mask;
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, Objective, ParamCheck, TapeObjective};
pub use rng::{mix_seed, stream};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Epsilon inside layer normalization.
pub const LN_EPS: f64 = 1e-5;
