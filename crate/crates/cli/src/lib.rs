//! Command layer for the `tmlevt` binary.

pub mod commands;
pub mod config;
pub mod pipeline;

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Input(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Corpus(#[from] tmlevt::corpus::CorpusError),
    #[error(transparent)]
    Index(#[from] tmlevt::tm_index::IndexError),
    #[error(transparent)]
    Edit(#[from] tmlevt::edit_calculus::EditError),
    #[error(transparent)]
    Policy(#[from] tmlevt::policy::PolicyError),
    #[error(transparent)]
    Decode(#[from] tmlevt::decoder::DecodeError),
    #[error(transparent)]
    Eval(#[from] tmlevt::eval::EvalError),
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn json(path: &Path, source: serde_json::Error) -> Self {
        Self::Json {
            path: path.display().to_string(),
            source,
        }
    }

    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Config(_) => "config",
            Self::Input(_) => "input",
            Self::Io { .. } => "io",
            Self::Corpus(_) => "corpus",
            Self::Index(_) => "index",
            Self::Edit(_) => "edit",
            Self::Policy(_) => "policy",
            Self::Decode(_) => "decode",
            Self::Eval(_) => "eval",
            Self::Json { .. } => "json",
        }
    }

    /// One JSON line for stderr.
    pub fn to_line(&self) -> String {
        serde_json::json!({"error": self.kind(), "message": self.to_string()}).to_string()
    }
}
