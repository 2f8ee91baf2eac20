//! Failures above the library layer: bad files, bad configs, and pipeline
//! stages that abort. Stage errors wrap the cause so the operator sees
//! which phase died without losing the underlying message.

use std::io;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] splinter_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },

    #[error("config {path}: {msg}")]
    Config { path: String, msg: String },

    #[error("{path}: byte {offset}: {msg}")]
    Format { path: String, offset: u64, msg: String },

    #[error("{0}")]
    Usage(String),

    #[error("stage '{stage}' failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<CliError>,
    },
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: impl AsRef<Path>, source: io::Error) -> CliError {
        CliError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn format(path: impl AsRef<Path>, offset: u64, msg: impl Into<String>) -> CliError {
        CliError::Format {
            path: path.as_ref().display().to_string(),
            offset,
            msg: msg.into(),
        }
    }

    /// Names the pipeline stage an error escaped from.
    pub fn stage(&self) -> Option<&'static str> {
        match self {
            CliError::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }
}

/// Tags any error escaping `stage` with the stage name. Results produced by
/// completed stages stay on disk, so a failed run leaves its partial state
/// behind for inspection.
pub fn in_stage<T>(stage: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| CliError::Stage {
        stage,
        source: Box::new(e),
    })
}
