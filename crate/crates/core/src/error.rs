use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("estimator error: {0}")]
    Estimator(String),

    #[error("config error at `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error("diverged at step {step}: {reason} (last checkpoint: {})", display_path(.last_checkpoint))]
    Divergence {
        step: u64,
        reason: String,
        last_checkpoint: Option<PathBuf>,
    },

    #[error("scenario generation failed: {0}")]
    Generation(String),

    #[error("parse error in {path}:{line}: field `{field}`: {msg}")]
    Parse {
        path: String,
        line: u64,
        field: String,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn display_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or_else(|| "none".to_string(), |p| p.display().to_string())
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }
}
