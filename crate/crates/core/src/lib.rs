//! Simulation and numerical checks for weighted spin averages in the
//! high-temperature Sherrington–Kirkpatrick model.

pub mod cli;
pub mod clt;
pub mod config;
pub mod disorder;
pub mod error;
pub mod exact;
pub mod interpolation;
pub mod mcmc;
pub mod model;
pub mod qsolver;
pub mod quadrature;
pub mod replica;
pub mod seed;
pub mod stats;
pub mod weights;

pub use error::{Error, Result};
pub use model::{GibbsTable, ModelParams, SpinConfig};
pub use stats::Estimate;
pub use weights::WeightVector;
