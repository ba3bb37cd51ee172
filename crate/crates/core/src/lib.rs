//! Hidden Markov scale mixture model (HMSMM) for multichannel seizure
//! detection: Student-t emissions fitted by EM, a constrained Markov chain,
//! forward-backward inference, signal preparation, detection metrics,
//! baselines, synthetic data and file formats.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod baselines;
pub mod config;
pub mod crossval;
pub mod data;
pub mod em;
pub mod emission;
pub mod error;
pub mod eval;
pub mod inference;
pub mod io;
pub mod linalg;
pub mod markov;
pub mod signal;
pub mod special;
pub mod synthetic;
