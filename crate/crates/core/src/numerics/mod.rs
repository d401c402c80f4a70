//! Differentiable computation substrate: tensors, a reverse-mode tape with
//! a stop-gradient operator, an Adam optimizer, and a finite-difference
//! gradient checker. Training defaults to f32; f64 exists for gradient
//! checking.

mod adam;
mod gradcheck;
mod real;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, OptimizerState};
pub use gradcheck::{grad_check, GradCheckEntry, GradCheckReport};
pub use real::Real;
pub use tape::{AttnMode, Tape, Var};
pub use tensor::{ParamId, ParamSet, Parameter, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("non-finite gradient in parameter '{0}'")]
    NonFiniteGrad(String),
    #[error("non-finite loss: {0}")]
    NonFiniteLoss(f64),
    #[error("{0}")]
    Invalid(String),
}
