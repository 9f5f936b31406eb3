//! Bayesian spatial extremes: the hierarchical extreme-value process (HEVP),
//! its stick-breaking generalization (SB), and the max-mixture hybrid (MM).

pub mod distributions;
pub mod error;
pub mod geometry;
pub mod gp;
pub mod io;
pub mod mcmc;
pub mod models;
pub mod predict;
pub mod quad;
pub mod rng;
pub mod simulate;
pub mod stats;

pub use error::{Error, Result};
pub use rng::RngStream;
