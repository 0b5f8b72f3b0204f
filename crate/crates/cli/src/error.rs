use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("missing prerequisite {path}: run `{stage}` first")]
    Prerequisite { path: PathBuf, stage: &'static str },

    #[error(
        "{path} was produced under config hash {found}, current config hashes to {expected}; \
         re-run `{stage}` or pass --force"
    )]
    HashMismatch {
        path: PathBuf,
        found: String,
        expected: String,
        stage: &'static str,
    },

    #[error(transparent)]
    Core(mapkd_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Core(mapkd_core::Error::Config(_)) => 2,
            CliError::Prerequisite { .. } | CliError::HashMismatch { .. } => 3,
            CliError::Core(_) => 4,
        }
    }
}

impl From<mapkd_core::Error> for CliError {
    fn from(e: mapkd_core::Error) -> Self {
        CliError::Core(e)
    }
}
