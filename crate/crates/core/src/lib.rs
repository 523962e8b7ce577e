//! Penalty-based stochastic optimization for developing contrastive
//! vision–language models under per-class retention constraints.

pub mod baselines;
pub mod cli;
pub mod data;
pub mod error;
pub mod estimators;
pub mod experiment;
pub mod linalg;
pub mod metrics;
pub mod losses;
pub mod model;
pub mod optimizer;
pub mod rng;

pub use error::{Error, Result};
