//! Point-mass maze environments and flow-based RL algorithms: behavior
//! cloning, goal-conditioned BC, offline actor-critic and density-driven
//! goal selection for exploration.

pub mod bc;
pub mod critic;
pub mod data;
pub mod env;
pub mod error;
pub mod expert;
pub mod gaussian;
pub mod policy;
pub mod rlbc;
pub mod tabular;
pub mod ugs;

pub use data::{Dataset, ReplayBuffer, Trajectory, TransitionRef};
pub use env::{EnvConfig, Maze, MazeId, PointMassEnv, RewardKind};
pub use error::{Result, RlError};

/// Crate version plus `git describe` of the build, recorded in dataset headers.
pub const GENERATOR_VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "+", env!("NFRL_GIT_DESCRIBE"));
