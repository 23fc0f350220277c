use align_core::analysis::AnalysisError;
use align_core::model::ModelError;
use thiserror::Error;

/// Failure classes, each with its own exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    /// A required input file is absent; `producer` is the subcommand that
    /// writes it.
    pub fn missing(what: &str, path: &std::path::Path, producer: &str) -> Self {
        CliError::Data(format!(
            "{what} not found at {}; run `alignbench {producer}` with the same config first",
            path.display()
        ))
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        if e.is_numeric() {
            CliError::Numeric(e.to_string())
        } else {
            CliError::Data(e.to_string())
        }
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        if e.is_numeric() {
            CliError::Numeric(e.to_string())
        } else {
            CliError::Data(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(format!("I/O error: {e}"))
    }
}

impl From<align_core::vision::VisionError> for CliError {
    fn from(e: align_core::vision::VisionError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(format!("JSON error: {e}"))
    }
}
