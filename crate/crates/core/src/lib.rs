//! Simulation and verification of matrix diffusions on complex partial flag manifolds.

pub mod error;
pub mod experiment;
pub mod flag;
pub mod functionals;
pub mod jacobi;
pub mod liebm;
pub mod matcore;
pub mod stats;

pub use error::{Error, Result};
