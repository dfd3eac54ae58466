use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CirkdError>;

#[derive(Debug, Error)]
pub enum CirkdError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("degenerate embedding at row {row} (norm {norm:e})")]
    DegenerateEmbedding { row: usize, norm: f64 },

    #[error("row {row} is not unit length (norm {norm})")]
    NotNormalized { row: usize, norm: f64 },

    #[error("class id {class_id} out of range for {num_classes} classes")]
    ClassOutOfRange { class_id: usize, num_classes: usize },

    #[error("every pixel is ignored; nothing to supervise")]
    EmptySupervision,

    #[error("mIoU undefined: every class has an empty union")]
    UndefinedMetric,

    #[error("non-finite activation in {0}")]
    NumericOverflow(String),

    #[error("{0}")]
    State(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },
}

impl CirkdError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        CirkdError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CirkdError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors a caller should treat as bad user configuration.
    pub fn is_config(&self) -> bool {
        matches!(self, CirkdError::Config(_) | CirkdError::Param(_))
    }
}
