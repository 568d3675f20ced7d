use coordfuse::Error;
use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] Error),
    #[error("gradient check failed: {0}")]
    GradCheck(String),
    #[error("rerun mismatch: {0}")]
    Mismatch(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(Error::InvalidArgument(_)) => 2,
            CliError::Core(e) if e.is_numeric() => 4,
            CliError::Core(_) => 3,
            CliError::GradCheck(_) | CliError::Mismatch(_) => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self.exit_code() {
            2 => "config",
            3 => "data",
            _ => "numeric",
        }
    }

    /// One-line JSON record for stderr.
    pub fn to_json(&self) -> String {
        json!({"error": self.kind(), "exit_code": self.exit_code(), "message": self.to_string()}).to_string()
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub(crate) fn io_err(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Core(Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}
