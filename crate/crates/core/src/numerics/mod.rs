//! Deterministic f64 tensor kernel with reverse-mode autodiff.
//!
//! The kernel is deliberately small: plain row-major buffers, a Wengert
//! tape recording one node per operation, and a finite-difference
//! checker that every differentiable op is tested against.

pub mod gradcheck;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use rng::Rng;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
