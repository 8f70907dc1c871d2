//! Operator surface for the flow library: data generation, training,
//! evaluation, oracle checks and metric export.

pub mod checks;
pub mod cli;
pub mod config;
pub mod datasets;
pub mod error;
pub mod eval;
pub mod run;
pub mod train;

pub use config::{Algorithm, RunConfig};
pub use error::CliError;
