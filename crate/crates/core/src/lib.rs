//! Classic and operator-averaged ("fast") two-time-scale stochastic
//! approximation for coupled strongly monotone root-finding problems, plus the
//! policy-evaluation and LQR actor-critic experiments built on top of them.

// `!(a <= b)` is used on purpose so that NaN counts as a violation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod analysis;
pub mod config;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod lqr;
pub mod policy_eval;
pub mod problem;
pub mod schedule;
pub mod solver;

pub use error::{Error, Result};

use rand::SeedableRng;

/// Random stream used everywhere: one per run, seeded from a `u64`.
pub type SimRng = rand_chacha::ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}
