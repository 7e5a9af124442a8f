use std::fmt::Write as _;
use std::path::PathBuf;

use crate::config::Issue;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] mdfr_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}", render_issues(path, issues))]
    Validation { path: PathBuf, issues: Vec<Issue> },
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Usage(String),
    #[error("missing {what}: {path}")]
    Missing { what: &'static str, path: PathBuf },
}

fn render_issues(path: &std::path::Path, issues: &[Issue]) -> String {
    let mut s = format!("invalid config {}:", path.display());
    for i in issues {
        let _ = write!(s, "\n  {i}");
    }
    s
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
