pub mod cli;
pub mod config;
pub mod coupling;
pub mod error;
pub mod models;
pub mod psi;
pub mod quadrature;
pub mod rng;
pub mod stats;
pub mod verify;
pub mod wasserstein;

pub use error::{Error, Result};
