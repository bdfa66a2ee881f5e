//! Dense tensor substrate with reverse-mode differentiation.
//!
//! [`Tensor`] holds row-major `f64` data of rank at most three
//! (batch × time × feature). A [`Tape`] records primitive applications and
//! [`Tape::backward`] replays them in reverse to accumulate gradients.
//! [`gradcheck`] provides the finite-difference oracle the primitives are
//! tested against, and [`Rng`] is the seeded generator shared by every
//! stochastic component downstream.

mod error;
pub mod gradcheck;
mod kernels;
pub mod rng;
mod tape;
mod tensor;

pub use error::NumError;
pub use rng::{derive_seed, Rng};
pub use tape::{logistic, softplus_f64, Gradients, Tape, Var};
pub use tensor::{Tensor, MAX_RANK};
