use std::path::{Path, PathBuf};

use scformer::data::DataError;
use scformer::model::{CheckpointError, ModelError};
use scformer::trainer::TrainError;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot read config {path}: {message}")]
    ConfigIo { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("cannot write {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{0}")]
    Usage(String),
    #[error("{failed} verification checks failed")]
    VerifyFailed { failed: usize },
}

impl CliError {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            Self::ConfigIo { .. } => "config_io",
            Self::ConfigInvalid(_) => "config_invalid",
            Self::Data(DataError::Io { .. }) => "dataset_io",
            Self::Data(
                DataError::SplitTooLarge { .. }
                | DataError::ShortSplit { .. }
                | DataError::InvalidSplit(_),
            ) => "split_invalid",
            Self::Data(_) => "dataset_invalid",
            Self::Model(_) => "model_error",
            Self::Checkpoint(CheckpointError::Mismatch { .. }) => "checkpoint_mismatch",
            Self::Checkpoint(CheckpointError::Io { .. }) => "checkpoint_io",
            Self::Checkpoint(_) => "checkpoint_corrupt",
            Self::Train(TrainError::Diverged { .. }) => "training_diverged",
            Self::Train(TrainError::Checkpoint(CheckpointError::Io { .. })) => "checkpoint_io",
            Self::Train(_) => "training_failed",
            Self::Io { .. } => "output_io",
            Self::Usage(_) => "usage",
            Self::VerifyFailed { .. } => "verify_failed",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            Self::VerifyFailed { .. } => 3,
            _ => 1,
        }
    }
}

#[derive(Serialize)]
struct ErrorArtifact<'a> {
    code: &'a str,
    message: String,
    command: &'a str,
    seed: Option<u64>,
}

/// Writes `error.json` into `dir`, creating it if needed.
pub fn write_error(
    dir: &Path,
    command: &str,
    seed: Option<u64>,
    err: &CliError,
) -> std::io::Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join("error.json");
    let body = ErrorArtifact {
        code: err.code(),
        message: err.to_string(),
        command,
        seed,
    };
    std::fs::write(
        &path,
        serde_json::to_vec_pretty(&body).expect("plain struct serializes"),
    )?;
    Ok(path)
}

pub fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}
