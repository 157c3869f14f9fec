use std::io;
use std::path::PathBuf;

use ngc_core::checkpoint::CheckpointError;
use ngc_core::data::DataError;
use ngc_core::model::ModelError;
use ngc_core::train::TrainError;
use thiserror::Error;

use crate::config::ConfigError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{}: {source}", path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("model and data disagree: {0}")]
    Mismatch(String),
    #[error("{0}")]
    CheckFailed(String),
}

impl CliError {
    /// 1 for usage and validation problems, 2 for everything found at run time.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config(_) | CliError::Train(TrainError::Config(_)) => 1,
            _ => 2,
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }

    pub fn csv(path: impl Into<PathBuf>) -> impl FnOnce(csv::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Csv { path, source }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
