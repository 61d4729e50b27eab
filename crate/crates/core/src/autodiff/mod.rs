//! Minimal dense-tensor reverse-mode automatic differentiation.
//!
//! Values live on an append-only [`Tape`]; every op records its inputs so a
//! single reverse sweep produces exact gradients. Everything is f64 and
//! deterministic given the same inputs and RNG seed.

mod tape;
mod tensor;

pub use tape::{Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("rank error: {0}")]
    RankError(String),
    #[error("all positions masked out")]
    DegenerateMask,
    #[error("invalid dropout probability {0} (must be in [0, 1))")]
    InvalidProbability(f64),
}
