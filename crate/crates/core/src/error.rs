use std::path::PathBuf;

/// Errors produced by the core library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("input is empty: {0}")]
    Empty(String),

    #[error("duplicate event (user {user_id}, item {item_id}, timestamp {timestamp})")]
    DuplicateEvent {
        user_id: String,
        item_id: String,
        timestamp: i64,
    },

    #[error("user {user_id} has {count} events; at least {required} are required")]
    TooFewEvents {
        user_id: String,
        count: usize,
        required: usize,
    },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown item {0}")]
    UnknownItem(String),

    #[error("invalid format: {0}")]
    Format(String),

    #[error("degenerate group: all {0} rewards are equal")]
    DegenerateGroup(usize),

    #[error("chat client error: {0}")]
    Client(String),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable tag for machine-readable error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Empty(_) => "empty",
            Error::DuplicateEvent { .. } => "duplicate_event",
            Error::TooFewEvents { .. } => "too_few_events",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::Domain(_) => "domain",
            Error::Config(_) => "config",
            Error::UnknownItem(_) => "unknown_item",
            Error::Format(_) => "format",
            Error::DegenerateGroup(_) => "degenerate_group",
            Error::Client(_) => "client",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
