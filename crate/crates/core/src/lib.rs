//! Monotone couplings of binomial Galton–Watson trees conditioned on survival.

pub mod cli;
pub mod combinatorics;
pub mod couplings;
pub mod error;
pub mod flow;
pub mod kernels;
pub mod params;
pub mod rng;
pub mod samplers;
pub mod tree;
pub mod verify;

pub use error::{Error, Result};
