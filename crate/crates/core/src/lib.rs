//! Normalizing flows with exact likelihood, exact sampling and gradients
//! through both directions, built on a small reverse-mode tape.
//!
//! - [`grad`]: tape, MLPs, Adam, checkpoints
//! - [`flow`]: coupling + PLU linear flow model
//! - [`objectives`]: MLE, VI, denoising and conditioning-mask utilities

pub mod error;
pub mod flow;
pub mod grad;
pub mod kv;
pub mod objectives;

pub use error::{Error, Result};
