use thiserror::Error;

pub type Result<T> = std::result::Result<T, RlError>;

#[derive(Debug, Error)]
pub enum RlError {
    #[error(transparent)]
    Core(#[from] nfrl_core::Error),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid state: {0}")]
    State(String),

    /// The scripted expert fell short of its success floor.
    #[error("dataset generation failed: {0}")]
    Generation(String),

    #[error("malformed dataset: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl RlError {
    /// True for failures caused by NaN/inf values rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            RlError::Core(nfrl_core::Error::NonFinite { .. } | nfrl_core::Error::NonFiniteLoss { .. } | nfrl_core::Error::Singular { .. })
        )
    }
}
