//! Posterior regularization with learnable knowledge constraints.

// `!(x > 0.0)` is used on purpose to reject NaN along with the bad range.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod constraints;
pub mod energy;
pub mod error;
pub mod harness;
pub mod model;
pub mod numeric;
pub mod oracle;
pub mod params;
pub mod rl_bridge;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
