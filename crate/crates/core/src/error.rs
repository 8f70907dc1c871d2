use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input or parameter shapes do not match what an operation expects.
    #[error("dimension mismatch: {0}")]
    Shape(String),

    /// A model or layer was described with values it cannot be built from.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// An operation was called out of order, e.g. backward on an empty tape.
    #[error("invalid state: {0}")]
    State(String),

    #[error("non-finite value in {location}")]
    NonFinite { location: String },

    #[error("non-finite loss at batch row {row}")]
    NonFiniteLoss { row: usize },

    #[error("singular linear flow in block {block}: |U[{index},{index}]| = {value:e}")]
    Singular { block: usize, index: usize, value: f64 },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
