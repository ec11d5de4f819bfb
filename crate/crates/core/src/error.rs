use thiserror::Error;

/// Crate-wide error type. Variants map onto process exit codes at the CLI
/// boundary: `Config` and `Usage` are caller mistakes (exit 2), everything
/// else is a runtime failure (exit 1).
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed input file; `line` is 1-based.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Structurally valid input that violates a domain rule.
    #[error("validation error: {0}")]
    Validation(String),

    /// Bad configuration (paths, ratios, hyperparameter ranges).
    #[error("config error: {0}")]
    Config(String),

    /// An operation was called outside its contract.
    #[error("usage error: {0}")]
    Usage(String),

    /// Input is valid but exceeds what an exact algorithm can handle.
    #[error("capability error: {0}")]
    Capability(String),

    /// Non-finite loss or other numeric breakdown mid-run.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A pipeline stage failed; wraps the underlying cause.
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse { line, message: message.into() }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage { stage, source: Box::new(self) }
    }

    /// True when the error is the caller's fault rather than a runtime
    /// failure. Stage wrappers defer to their cause.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) | Error::Usage(_) => true,
            Error::Stage { source, .. } => source.is_config(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
