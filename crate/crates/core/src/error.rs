use std::fmt;
use std::path::PathBuf;

/// One offending manifest line found during validation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Issue {
    /// 1-based line number in the source file, 0 when not file-backed.
    pub line: usize,
    pub clip_id: Option<String>,
    pub message: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.line > 0 {
            write!(f, "line {}: ", self.line)?;
        }
        if let Some(id) = &self.clip_id {
            write!(f, "clip `{id}`: ")?;
        }
        f.write_str(&self.message)
    }
}

fn join_issues(issues: &[Issue]) -> String {
    issues
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("manifest validation failed: {}", join_issues(.0))]
    Validation(Vec<Issue>),

    #[error("merge error: {0}")]
    Merge(String),

    #[error("format error in {field}: {message}")]
    Format { field: &'static str, message: String },

    #[error("state error: {0}")]
    State(String),

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("missing feature files for clips: {}", .0.join(", "))]
    MissingFeatures(Vec<String>),

    #[error("gradient oracle error: {0}")]
    Oracle(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(field: &'static str, message: impl Into<String>) -> Self {
        Error::Format {
            field,
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
