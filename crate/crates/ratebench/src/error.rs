use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("failed precondition: {0}")]
    FailedPrecondition(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("unsupported checkpoint version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("non-finite loss at step {step}; components: {snapshot}")]
    NonFiniteLoss { step: u64, snapshot: String },

    #[error(transparent)]
    Core(#[from] ratebench_core::CoreError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn precondition(msg: impl Into<String>) -> Self {
        Error::FailedPrecondition(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Stable machine-readable tag; emitted in the CLI's JSON error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid_argument",
            Error::FailedPrecondition(_) => "failed_precondition",
            Error::Config(_) => "config",
            Error::UnsupportedVersion { .. } => "unsupported_version",
            Error::CorruptCheckpoint(_) => "corrupt_checkpoint",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Core(_) => "invalid_argument",
            Error::Io(_) => "io",
        }
    }
}
