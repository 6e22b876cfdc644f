//! Simulation-based system identification: synthetic training sets, affine
//! and recurrent-network estimators, particle-filter Metropolis-Hastings
//! baselines and the coupled-drives Wiener benchmark.

pub mod dataset;
pub mod drives;
pub mod evaluation;
pub mod error;
pub mod linear_lab;
pub mod mh;
pub mod models;
pub mod prior;
pub mod rng;
pub mod rnn;
pub mod smc;

pub use error::{Error, Result};
