//! Reward learning from pairwise preferences of heterogeneous annotators.

// `!(x > 0.0)` is how config checks reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod inference;
pub mod model;
pub mod objective;
pub mod params;
pub mod report;
pub mod segment;
pub mod trainer;

pub use error::{Error, Result};
