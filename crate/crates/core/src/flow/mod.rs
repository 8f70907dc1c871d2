//! Conditional normalizing flow: affine couplings interleaved with PLU linear flows.

pub mod context;
pub mod coupling;
pub mod linear;
pub mod model;

pub use context::ConditionContext;
pub use coupling::{CouplingBlock, SplitParity};
pub use linear::LinearFlow;
pub use model::{std_normal_log_density, std_normal_log_density_on, FlowBlock, FlowConfig, FlowModel, FlowPass, PermutationInit};
