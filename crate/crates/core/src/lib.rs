//! Dynamic latent class choice model with instance-based learning
//! expectations.
//!
//! Riders switch between a compensatory class, whose route choices follow a
//! mixed logit on expected attributes, and a non-compensatory class, whose
//! choices depend on the previous route. Class membership evolves as a
//! first-order hidden Markov chain driven by expectation mismatches.

pub mod baselines;
pub mod dgp;
pub mod em;
pub mod error;
pub mod iblt;
pub mod model;
pub mod optim;
pub mod panel;
pub mod pipeline;
pub mod viterbi;

pub use error::{Error, Result};
