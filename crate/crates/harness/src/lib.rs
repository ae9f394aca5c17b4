//! Experiment runner for EMI exploration agents: run configs, the training
//! loop with its CSV/SVG artifacts, the BoxImage embedding experiment and the
//! embedding-quality measurements used to judge it.

pub mod align;
pub mod boundary;
pub mod boximage;
pub mod config;
mod error;
pub mod plot;
pub mod run;

pub use error::{HarnessError, Result};
