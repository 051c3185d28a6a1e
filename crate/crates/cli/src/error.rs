use thiserror::Error;
use tkgqa_agent::runtime::EpisodeError;
use tkgqa_core::search::SearchError;
use tkgqa_core::{EmbedError, IndexError, StoreError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Upstream(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Upstream(_) => 3,
        }
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<EmbedError> for CliError {
    fn from(e: EmbedError) -> Self {
        CliError::Upstream(e.to_string())
    }
}

impl From<IndexError> for CliError {
    fn from(e: IndexError) -> Self {
        match e {
            IndexError::Embed(inner) => inner.into(),
            IndexError::FingerprintMismatch { .. } => {
                CliError::Usage(format!("{e}; rebuild the index or pass --force"))
            }
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<SearchError> for CliError {
    fn from(e: SearchError) -> Self {
        match e {
            SearchError::Embed(inner) => inner.into(),
            SearchError::Index(inner) => inner.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<EpisodeError> for CliError {
    fn from(e: EpisodeError) -> Self {
        if e.is_upstream() {
            CliError::Upstream(e.to_string())
        } else {
            CliError::Data(e.to_string())
        }
    }
}
