use std::path::{Path, PathBuf};

use serde_json::json;

/// Malformed binary input, located by byte offset.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{reason} at byte {offset}")]
pub struct FormatError {
    pub offset: u64,
    pub reason: String,
}

impl FormatError {
    pub fn new(offset: u64, reason: impl Into<String>) -> Self {
        Self { offset, reason: reason.into() }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ZoriError {
    #[error(transparent)]
    Core(#[from] zori_core::Error),
    #[error("{path}: {source}")]
    Format { path: PathBuf, source: FormatError },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Json { path: PathBuf, message: String },
    #[error("config field `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("{0}")]
    Usage(String),
}

pub type Result<T, E = ZoriError> = std::result::Result<T, E>;

impl ZoriError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }

    pub fn format(path: &Path, source: FormatError) -> Self {
        Self::Format { path: path.to_path_buf(), source }
    }

    pub fn json(path: &Path, err: impl std::fmt::Display) -> Self {
        Self::Json { path: path.to_path_buf(), message: err.to_string() }
    }

    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self::Config { field: field.into(), reason: reason.into() }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Core(_) => "core",
            Self::Format { .. } => "format",
            Self::Io { .. } => "io",
            Self::Json { .. } => "json",
            Self::Config { .. } => "config",
            Self::Usage(_) => "usage",
        }
    }

    /// Machine-readable form written to stderr by the binary.
    pub fn to_json(&self) -> serde_json::Value {
        let mut body = json!({ "kind": self.kind(), "message": self.to_string() });
        let obj = body.as_object_mut().expect("object literal");
        match self {
            Self::Format { path, source } => {
                obj.insert("path".into(), json!(path.display().to_string()));
                obj.insert("offset".into(), json!(source.offset));
                obj.insert("reason".into(), json!(source.reason));
            }
            Self::Io { path, .. } | Self::Json { path, .. } => {
                obj.insert("path".into(), json!(path.display().to_string()));
            }
            Self::Config { field, reason } => {
                obj.insert("field".into(), json!(field));
                obj.insert("reason".into(), json!(reason));
            }
            Self::Core(e) => {
                obj.insert("detail".into(), json!(format!("{e:?}")));
            }
            Self::Usage(_) => {}
        }
        json!({ "error": body })
    }
}
