use std::io;
use std::path::Path;

use stam::config::ConfigError;
use stam::data::DataError;
use stam::explain::ExplainError;
use stam::model::ModelError;
use stam::train::TrainError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("missing prerequisite: {0}")]
    Missing(String),
    #[error("ablation grid: only {completed} of {total} cells completed")]
    Grid { completed: usize, total: usize },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } => 3,
            CliError::Missing(_) => 4,
            CliError::Grid { .. } => 5,
        }
    }

    pub fn io(path: &Path, source: io::Error) -> Self {
        CliError::Io { path: path.display().to_string(), source }
    }

    pub fn invalid_file(path: &Path, detail: impl ToString) -> Self {
        CliError::Io { path: path.display().to_string(), source: io::Error::other(detail.to_string()) }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Parameter(m) => CliError::Config(m),
            DataError::Io { path, source } => CliError::Io { path, source },
            DataError::Format { path, detail } => {
                CliError::Io { path, source: io::Error::new(io::ErrorKind::InvalidData, detail) }
            }
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Data(d) => d.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<ExplainError> for CliError {
    fn from(e: ExplainError) -> Self {
        match e {
            ExplainError::Io { path, source } => CliError::Io { path, source },
            other => CliError::Config(other.to_string()),
        }
    }
}
