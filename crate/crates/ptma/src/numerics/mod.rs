//! Dense-tensor computation with reverse-mode differentiation.
//!
//! [`tensor`] holds the value type and the forward kernels, [`tape`] records
//! operations for the backward pass, and [`gradcheck`] verifies analytic
//! gradients against central finite differences. Training runs in single
//! precision; gradient checks run in double precision, where finite
//! differences are actually usable.

pub mod gradcheck;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{Op, ParamGrads, Tape, VarId};
pub use tensor::{real, Scalar, Tensor, NEG_MASK};
