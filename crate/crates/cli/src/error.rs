use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("stage `{stage}` needs `{missing}`; run `cbred {hint}` first")]
    DependencyMissing {
        stage: &'static str,
        missing: String,
        hint: &'static str,
    },

    #[error("provenance mismatch in `{stage}`: {detail}")]
    ProvenanceMismatch { stage: &'static str, detail: String },

    #[error("configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] cbred::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type CliResult<T> = Result<T, CliError>;
