use std::path::PathBuf;

use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] bitlock_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("IDX format error at byte {offset}: {message}")]
    Idx { offset: usize, message: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing artifact {0}; run the producing stage first")]
    MissingArtifact(PathBuf),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

impl HarnessError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io { path: path.into(), source }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            HarnessError::Core(bitlock_core::Error::Input(_)) => "input",
            HarnessError::Core(bitlock_core::Error::Shape { .. }) => "shape",
            HarnessError::Core(bitlock_core::Error::Numeric { .. }) => "numeric",
            HarnessError::Core(bitlock_core::Error::Format(_)) => "format",
            HarnessError::Core(bitlock_core::Error::Config(_)) | HarnessError::Config(_) => "config",
            HarnessError::Core(bitlock_core::Error::Plan(_)) => "plan",
            HarnessError::Io { .. } => "io",
            HarnessError::Idx { .. } => "idx",
            HarnessError::MissingArtifact(_) => "missing_artifact",
        }
    }

    /// Process exit status for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self.kind() {
            "config" => 2,
            "io" | "missing_artifact" => 3,
            _ => 1,
        }
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Body<'a> {
            kind: &'a str,
            message: String,
        }
        #[derive(Serialize)]
        struct Envelope<'a> {
            error: Body<'a>,
        }
        serde_json::to_string(&Envelope {
            error: Body {
                kind: self.kind(),
                message: self.to_string(),
            },
        })
        .expect("plain strings serialize")
    }
}
