use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("validation failed: {0}")]
    Validation(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("similarity backend failed: {0}")]
    Backend(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("optimization diverged: {0}")]
    Diverged(String),

    #[error("adapter injection rejected: {0}")]
    InjectionSite(String),

    #[error("stage dependency missing: stage `{stage}` requires `{path}` (run the earlier stage first)")]
    StageDependency { stage: String, path: PathBuf },

    #[error("unsupported format: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image codec error: {0}")]
    Image(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    /// Machine-readable error kind used in failure records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Validation(_) => "validation",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::Backend(_) => "backend",
            Error::NonFinite(_) => "non_finite",
            Error::Diverged(_) => "diverged",
            Error::InjectionSite(_) => "injection_site",
            Error::StageDependency { .. } => "stage_dependency",
            Error::Format(_) => "format",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Image(_) => "image",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
