//! Reverse-mode automatic differentiation over dense real tensors.

pub mod checkpoint;
mod gemm;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{check_param_gradients, grad_check, relative_error, ParamCheck, Probe};
pub use params::{Gradients, ParamId, ParamStore};
pub use tape::{permutation_index, CustomOp, Tape, Var};
pub use tensor::Tensor;

/// Smoothing constant inside the two-channel magnitude.
pub const MAGNITUDE_EPS: f64 = 1e-12;

#[cfg(test)]
mod tests;
