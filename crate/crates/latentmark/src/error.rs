//! Error taxonomy shared across the crate.
//!
//! Every failure carries a stable machine-parsable code (see [`LabError::code`])
//! that the CLI prints as `error[CODE]: message` before exiting nonzero.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum LabError {
    /// A precondition on an operation's arguments was violated.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A diffusion backend failed or is unavailable.
    #[error("backend error: {0}")]
    Backend(String),

    /// The requested attack is not supported by the configured surrogate.
    #[error("attack unsupported: {0}")]
    AttackUnsupported(String),

    /// A key or selector container failed validation.
    #[error("key/container error: {0}")]
    Key(String),

    /// Run configuration failed validation.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or unreadable artifact file.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for LabError {
    fn from(err: csv::Error) -> Self {
        LabError::Format(err.to_string())
    }
}

impl LabError {
    /// Stable short code for machine-parsable CLI errors.
    pub fn code(&self) -> &'static str {
        match self {
            LabError::Argument(_) => "E_ARG",
            LabError::Backend(_) => "E_BACKEND",
            LabError::AttackUnsupported(_) => "E_ATTACK_UNSUPPORTED",
            LabError::Key(_) => "E_KEY",
            LabError::Config(_) => "E_CONFIG",
            LabError::Format(_) => "E_FORMAT",
            LabError::Io(_) => "E_IO",
        }
    }
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, LabError>;

/// Shorthand for building an [`LabError::Argument`].
pub fn arg_err(msg: impl Into<String>) -> LabError {
    LabError::Argument(msg.into())
}
