//! Dense matrices, reverse-mode gradients, Adam and a finite-difference checker.

mod gradcheck;
pub mod kernels;
mod matrix;
mod params;
mod tape;

pub use gradcheck::{grad_check, GradCheckReport, DEFAULT_STEP};
pub use kernels::{activate, affine, sigmoid, Activation};
pub use matrix::Matrix;
pub use params::{AdamConfig, GradMap, ParamStore};
pub use tape::{MessageWeights, Tape, Var, PROB_CLIP};
