//! Error taxonomy shared across the crate.

use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Unreadable or undecodable input data.
    #[error("input error: {0}")]
    Input(String),

    /// A dataset source yielded zero decodable images.
    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    /// A caller violated an operation precondition (shape mismatch, batch too small, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration; `field` names the offending entry.
    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    /// Unknown encoder plugin name.
    #[error("unknown encoder plugin `{0}`")]
    UnknownPlugin(String),

    /// Checkpoint or record file could not be read or parsed.
    #[error("checkpoint error at {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    /// Training produced a non-finite loss; the diagnostic describes the step state.
    #[error("training diverged at step {step}: {diagnostic}")]
    Divergence { step: usize, diagnostic: String },

    /// An experiment output directory is already claimed by another run.
    #[error("output directory {0} is locked by another run")]
    OutputLocked(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { field: field.into(), message: message.into() }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
