use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config values or input files.
    #[error("{0}")]
    Usage(String),

    /// NaN/inf during training or evaluation.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// One or more oracle checks missed their threshold.
    #[error("{0}")]
    CheckFailed(String),

    #[error("{0}")]
    Runtime(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::CheckFailed(_) | CliError::Runtime(_) | CliError::Io(_) => 1,
        }
    }
}

impl From<nfrl_rl::RlError> for CliError {
    fn from(e: nfrl_rl::RlError) -> Self {
        use nfrl_rl::RlError;
        if e.is_numeric() {
            return CliError::Numeric(e.to_string());
        }
        match e {
            RlError::Core(c) => c.into(),
            RlError::Config(_) | RlError::Format(_) => CliError::Usage(e.to_string()),
            RlError::Io(io) => CliError::Io(io),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<nfrl_core::Error> for CliError {
    fn from(e: nfrl_core::Error) -> Self {
        use nfrl_core::Error;
        match e {
            Error::NonFinite { .. } | Error::NonFiniteLoss { .. } | Error::Singular { .. } => CliError::Numeric(e.to_string()),
            Error::Config(_) | Error::Format(_) | Error::Shape(_) => CliError::Usage(e.to_string()),
            Error::Io(io) => CliError::Io(io),
            Error::State(_) => CliError::Runtime(e.to_string()),
        }
    }
}
