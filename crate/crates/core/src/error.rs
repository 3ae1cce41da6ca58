use std::path::PathBuf;

use numcore::NumError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Numeric(#[from] NumError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("unknown domain id {id} (catalog has {n} domains)")]
    UnknownDomainId { id: usize, n: usize },
    #[error("unknown domain name `{0}`")]
    UnknownDomainName(String),
    #[error("empty utterance")]
    EmptyUtterance,
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("distillation needs a snapshot at epoch {epoch} but none exists")]
    MissingSnapshot { epoch: usize },
    #[error("training diverged at epoch {epoch}, step {step}: {reason}")]
    Diverged {
        epoch: usize,
        step: usize,
        reason: String,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Self::Io {
            context: context.into(),
            source,
        }
    }

    /// Numerical failures (non-finite values, divergence) as opposed to
    /// malformed input or configuration.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Diverged { .. }
                | Error::Numeric(NumError::NonFinite { .. })
                | Error::Numeric(NumError::NonFiniteNorm)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
