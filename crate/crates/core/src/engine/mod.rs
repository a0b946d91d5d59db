//! Reverse-mode automatic differentiation over dense NCHW tensors.

mod adam;
pub mod gradcheck;
mod kernels;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{grad_check, gradcheck_cases, gradcheck_suite, GradCase, OpCheck, GRADCHECK_STEP, GRADCHECK_TOLERANCE};
pub use params::{Param, ParamStore};
pub use scalar::Scalar;
pub use tape::{BatchStats, CustomBackward, Gradients, Reduction, Tape, UpsampleMode, Var, PROB_CLAMP};
pub use tensor::Tensor;

/// Displacement `(dy, dx)` encoded by each output channel of
/// [`Tape::correlation`], in channel order.
pub fn correlation_displacements(max_disp: usize) -> Vec<(isize, isize)> {
    kernels::displacements(max_disp).collect()
}
