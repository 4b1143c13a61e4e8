use apt_core::config::ConfigError;
use apt_core::diff::DiffError;
use apt_core::io::IoError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Numeric(String),
    #[error(transparent)]
    Io(IoError),
    #[error(transparent)]
    Model(apt_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) | CliError::Model(_) => 1,
            CliError::Numeric(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

fn is_numeric(e: &apt_core::Error) -> bool {
    matches!(
        e,
        apt_core::Error::NonFiniteLoss { .. } | apt_core::Error::Diff(DiffError::NonFinite { .. })
    )
}

impl From<apt_core::Error> for CliError {
    fn from(e: apt_core::Error) -> Self {
        if is_numeric(&e) {
            CliError::Numeric(e.to_string())
        } else {
            CliError::Model(e)
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        match e {
            IoError::Model(m) => m.into(),
            other => CliError::Io(other),
        }
    }
}
