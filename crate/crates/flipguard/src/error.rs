use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] flipguard_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A record file line that does not parse or fails validation.
    #[error("{path}:{line}: {message}")]
    Record { path: PathBuf, line: usize, message: String },

    #[error("{path}:{line}: expected `key = value`, got {text:?}")]
    ConfigSyntax { path: PathBuf, line: usize, text: String },

    #[error("unknown config key `{key}`{}", suggestion.as_ref().map(|s| format!(" (did you mean `{s}`?)")).unwrap_or_default())]
    UnknownKey { key: String, suggestion: Option<String> },

    #[error("config key `{key}` expects {expected}, got {value:?}")]
    ConfigType { key: String, expected: &'static str, value: String },

    #[error("training diverged: non-finite loss {loss} at step {step}; config: {config}")]
    Diverged { step: usize, loss: f64, config: String },

    /// An artifact file that exists but does not decode.
    #[error("{path}: {source}")]
    Artifact {
        path: PathBuf,
        #[source]
        source: flipguard_core::Error,
    },

    #[error("missing artifact {path}: {what}")]
    MissingArtifact { path: PathBuf, what: &'static str },

    #[error("{0}")]
    Usage(String),

    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Stable identifier used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Core(_) => "core",
            Error::Io { .. } => "io",
            Error::Record { .. } => "record",
            Error::ConfigSyntax { .. } => "config_syntax",
            Error::UnknownKey { .. } => "unknown_key",
            Error::ConfigType { .. } => "config_type",
            Error::Diverged { .. } => "diverged",
            Error::Artifact { .. } => "artifact",
            Error::MissingArtifact { .. } => "missing_artifact",
            Error::Usage(_) => "usage",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
