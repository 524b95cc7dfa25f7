use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config field `{field}` = {value}: {constraint}")]
    InvalidField {
        field: &'static str,
        value: String,
        constraint: &'static str,
    },

    #[error("config parse error: {0}")]
    ConfigParse(String),

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("length mismatch for `{video_id}`: {features} feature frames but {labels} label lines")]
    LengthMismatch {
        video_id: String,
        features: usize,
        labels: usize,
    },

    #[error("unknown label `{label}` in {} (not in mapping)", .path.display())]
    UnknownLabel { label: String, path: PathBuf },

    #[error("malformed {what}: {detail}")]
    Malformed { what: &'static str, detail: String },

    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("{0}")]
    InvalidArgument(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    /// True for errors caused by bad input data rather than configuration or runtime faults.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::MissingFile(_)
                | Error::LengthMismatch { .. }
                | Error::UnknownLabel { .. }
                | Error::Malformed { .. }
                | Error::NonFinite(_)
        )
    }

    pub fn is_config_error(&self) -> bool {
        matches!(self, Error::InvalidField { .. } | Error::ConfigParse(_))
    }
}
