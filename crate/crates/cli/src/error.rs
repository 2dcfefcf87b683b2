use std::path::PathBuf;

use serde::Serialize;
use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("missing {what}: {path}")]
    Missing { what: String, path: PathBuf },

    #[error("bad config: {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] ifgmi_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn missing(what: impl Into<String>, path: impl Into<PathBuf>) -> Self {
        CliError::Missing { what: what.into(), path: path.into() }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io { context: context.into(), source }
    }

    /// Stable snake_case tag for the error JSON.
    pub fn kind(&self) -> &'static str {
        use ifgmi_core::Error as E;
        match self {
            CliError::Missing { .. } => "missing_artifact",
            CliError::Config(_) => "invalid_config",
            CliError::Io { .. } => "io",
            CliError::Json(_) => "json",
            CliError::Core(e) => match e {
                E::Shape { .. } => "shape_mismatch",
                E::NonScalarLoss(_) => "non_scalar_loss",
                E::NonFiniteGradient(_) | E::NonFiniteLoss(_) => "non_finite",
                E::Diverged(_) => "diverged",
                E::InvalidArgument(_) => "invalid_argument",
                E::MissingParameter(_) => "architecture_mismatch",
                E::Format(_) => "bad_tensor_file",
                E::Checksum { .. } => "checksum_mismatch",
                E::Io(_) => "io",
                E::Json(_) => "json",
            },
        }
    }
}

/// What a failing invocation prints on stderr.
#[derive(Debug, Serialize)]
pub struct ErrorReport<'a> {
    pub command: &'a str,
    pub kind: &'a str,
    pub message: String,
    pub exit_code: i32,
}
