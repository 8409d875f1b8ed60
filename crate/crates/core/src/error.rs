use std::path::PathBuf;

use crate::model::{SpeakerId, Strategy};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left} vs {right}")]
    DimensionMismatch {
        op: &'static str,
        left: String,
        right: String,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown speaker {0}")]
    UnknownSpeaker(SpeakerId),

    #[error("speaker {0} is already registered")]
    SpeakerExists(SpeakerId),

    #[error("speaker {speaker} code is missing its {component} component")]
    MissingCode {
        speaker: String,
        component: &'static str,
    },

    #[error("strategy {0} cannot be folded into a plain network")]
    Unfoldable(Strategy),

    #[error("empty data: {0}")]
    EmptyData(&'static str),

    #[error("layer cache does not match layer: {0}")]
    CacheMismatch(&'static str),

    #[error("refusing to overwrite existing file {0}")]
    WouldOverwrite(PathBuf),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed document {path}: {reason}")]
    Parse { path: PathBuf, reason: String },
}

impl Error {
    pub(crate) fn dims(op: &'static str, left: impl ToString, right: impl ToString) -> Self {
        Error::DimensionMismatch {
            op,
            left: left.to_string(),
            right: right.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            reason: reason.to_string(),
        }
    }

    /// True for errors caused by bad user input rather than a runtime fault.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig(_)
                | Error::Parse { .. }
                | Error::Unfoldable(_)
                | Error::WouldOverwrite(_)
        )
    }
}
