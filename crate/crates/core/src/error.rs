use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("provenance mismatch: {0}")]
    Provenance(String),

    #[error("training diverged at step {step}: {detail}")]
    Training { step: usize, detail: String },

    /// Wraps a failure inside an orchestrated stage so the caller can tell
    /// which stage and fold aborted the run.
    #[error("stage `{stage}`{} failed: {source}", fold.map(|f| format!(" (fold {f})")).unwrap_or_default())]
    Stage {
        stage: String,
        fold: Option<usize>,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn in_stage(self, stage: impl Into<String>, fold: Option<usize>) -> Self {
        Error::Stage {
            stage: stage.into(),
            fold,
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
