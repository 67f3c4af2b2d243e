use std::path::PathBuf;

use demoner_core::corpus::CorpusError;
use demoner_core::demo::DemoError;
use demoner_core::encoding::{CacheError, EncodeError};
use demoner_core::eval::EvalError;
use demoner_core::featsim::FeatsimError;
use demoner_core::inference::InferenceError;
use demoner_core::tagger::TaggerError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Corpus { path: PathBuf, source: CorpusError },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{0}")]
    Data(String),
    #[error("training diverged: {0}")]
    Diverged(String),
}

impl CliError {
    /// 2 usage, 3 data, 4 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Diverged(_) => 4,
            _ => 3,
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}

impl From<TaggerError> for CliError {
    fn from(e: TaggerError) -> Self {
        match e {
            TaggerError::Diverged { .. } => CliError::Diverged(e.to_string()),
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<FeatsimError> for CliError {
    fn from(e: FeatsimError) -> Self {
        match e {
            FeatsimError::NonFiniteLoss { .. } => CliError::Diverged(e.to_string()),
            FeatsimError::BadGamma(_) | FeatsimError::BadSchedule => CliError::Usage(e.to_string()),
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<InferenceError> for CliError {
    fn from(e: InferenceError) -> Self {
        match e {
            InferenceError::EmptyEnsemble => CliError::Usage(e.to_string()),
            InferenceError::Tagger(t) => t.into(),
            e => CliError::Data(e.to_string()),
        }
    }
}

macro_rules! data_error {
    ($($t:ty),*) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Data(e.to_string())
            }
        })*
    };
}

data_error!(CorpusError, DemoError, EncodeError, CacheError, EvalError);
