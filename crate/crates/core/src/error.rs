use std::io;

use thiserror::Error;

pub type Result<T, E = CdalError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CdalError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("degenerate distribution: {0}")]
    Degenerate(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CdalError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        CdalError::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            CdalError::Config(_) | CdalError::InvalidArgument(_) => "config",
            CdalError::Data(_) | CdalError::Io(_) | CdalError::Json(_) | CdalError::Shape { .. } => "data",
            CdalError::Numeric(_) | CdalError::Degenerate(_) => "numeric",
        }
    }

    /// Process exit code: 2 config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self.kind() {
            "config" => 2,
            "data" => 3,
            _ => 4,
        }
    }
}
