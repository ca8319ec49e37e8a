//! Gradient boosting over untrained, randomly generated single-layer
//! networks.
//!
//! Every round draws a fresh random projection (materialized from a seeded
//! PRNG, or synthesized per feature from a seeded hash), turns its
//! standardized outputs into soft assignments with a softmax, and solves one
//! small regularized linear system per class for the output scores. The
//! distributed path needs only two all-reduce sums per round, whose size
//! depends on the number of output neurons alone.

pub mod booster;
pub mod collective;
pub mod dataset;
pub mod error;
pub mod forward;
pub mod hashwgen;
pub mod matrix;
pub mod metrics;
pub mod objective;
pub mod registry;
pub mod solver;
pub mod synthetic;

pub use error::{GbunError, Result};
pub use matrix::Matrix;
