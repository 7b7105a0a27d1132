//! Fairness-constrained semi-supervised classification.

pub mod baselines;
pub mod dataset;
pub mod decomposition;
pub mod error;
pub mod fairness;
pub mod graph;
pub mod harness;
pub mod losses;
pub mod optim;
pub mod solver;
pub mod synthetic;
mod conic;

pub use error::{FairError, Result};
