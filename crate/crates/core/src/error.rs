use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },

    #[error("split violation: train_env and val_env both resolve to {0}")]
    SplitViolation(PathBuf),

    #[error("invalid budget: {0}")]
    Budget(String),

    #[error("invalid timing: {0}")]
    Timing(String),

    #[error("no manifest: {0} has no SKILL.md")]
    NoManifest(PathBuf),

    #[error("malformed frontmatter: {0}")]
    Frontmatter(String),

    #[error("dangling primary_script: {0}")]
    DanglingPrimaryScript(String),

    #[error("invalid path {path:?}: {reason}")]
    InvalidPath { path: String, reason: &'static str },

    #[error("patch error: {0}")]
    Patch(String),

    #[error("sandbox configuration error: {0}")]
    SandboxConfig(String),

    #[error("workspace error: {0}")]
    Workspace(String),

    #[error("strategy error: {0}")]
    Strategy(String),

    #[error("contrast error: {0}")]
    Contrast(String),

    #[error("pre-screen rejected patch: {0}")]
    PreScreen(String),

    #[error("reasoner error: {0}")]
    Reasoner(String),

    #[error("loop error: {0}")]
    Loop(String),

    #[error("barrier violation: role {role} accessed {path}")]
    Barrier { role: String, path: String },

    #[error("serialization error: {0}")]
    Serde(String),

    #[error("backend configuration error: {0}")]
    BackendConfig(String),

    #[error("metrics error: {0}")]
    Metrics(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
