// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;
use thiserror::Error;
use wfad_core::backend::BackendError;
use wfad_core::dataset::DatasetError;
use wfad_core::detect::DetectError;
use wfad_core::evaluate::EvalError;
use wfad_core::ingest::IngestError;
use wfad_core::prompt::PromptError;

/// Process exit status for each error class.
pub mod exit {
    pub const OK: i32 = 0;
    pub const CONFIG: i32 = 2;
    pub const MISSING_INPUT: i32 = 3;
    pub const INPUT_DATA: i32 = 4;
    pub const BACKEND: i32 = 5;
    pub const LOCKED: i32 = 6;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("missing input {}", .0.display())]
    MissingInput(PathBuf),
    #[error("i/o on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("input data: {0}")]
    Data(String),
    #[error("backend: {0}")]
    Backend(String),
    #[error("output directory {} is locked by another run (remove {} if stale)", .0.display(), .0.join(crate::output::LOCK_FILE).display())]
    Locked(PathBuf),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::MissingInput(_) | CliError::Io { .. } => exit::MISSING_INPUT,
            CliError::Data(_) => exit::INPUT_DATA,
            CliError::Backend(_) => exit::BACKEND,
            CliError::Locked(_) => exit::LOCKED,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> CliError {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            CliError::MissingInput(path)
        } else {
            CliError::Io { path, source }
        }
    }
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        match e {
            IngestError::Schema(m) => CliError::Config(format!("schema: {m}")),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Config(m) => CliError::Config(m),
            DatasetError::Io(io) => CliError::Io {
                path: PathBuf::new(),
                source: io,
            },
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<BackendError> for CliError {
    fn from(e: BackendError) -> Self {
        match e {
            BackendError::Config(m) => CliError::Config(m),
            BackendError::Io(io) => CliError::Io {
                path: PathBuf::new(),
                source: io,
            },
            BackendError::DegenerateData(_) | BackendError::InvalidInput(_) | BackendError::Artifact(_) => {
                CliError::Data(e.to_string())
            }
            BackendError::NotReady(_) | BackendError::Adapter(_) | BackendError::Unsupported(_) => {
                CliError::Backend(e.to_string())
            }
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Backend(b) => b.into(),
            EvalError::Config(m) => CliError::Config(m),
            EvalError::Metric(m) => CliError::Data(m.to_string()),
            EvalError::Probe(m) => CliError::Backend(m),
        }
    }
}

impl From<DetectError> for CliError {
    fn from(e: DetectError) -> Self {
        match e {
            DetectError::Backend(b) => b.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<PromptError> for CliError {
    fn from(e: PromptError) -> Self {
        match e {
            PromptError::Config(m) => CliError::Config(m),
            other => CliError::Data(other.to_string()),
        }
    }
}
