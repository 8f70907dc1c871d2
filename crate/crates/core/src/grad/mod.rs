//! Differentiable primitives over flat parameter stores.

pub mod checkpoint;
pub mod fd;
pub mod matrix;
pub mod mlp;
pub mod optim;
pub mod params;
pub mod tape;

pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use matrix::Matrix;
pub use mlp::{Mlp, MlpSpec, OutputInit};
pub use optim::{Adam, AdamConfig, StepOutcome};
pub use params::{ParamSlice, ParamStore};
pub use tape::{Activation, Gradients, StoreId, Tape, Triangle, Var};
