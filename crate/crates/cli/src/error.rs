use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}:{line}: {msg}")]
    File { path: PathBuf, line: usize, msg: String },
    #[error("invalid plan: {0}")]
    Plan(String),
    #[error("run {method} lr={lr} lambda={lambda} seed={seed} failed: {source}")]
    Run {
        method: String,
        lr: f64,
        lambda: f64,
        seed: u64,
        source: knit::Error,
    },
    #[error("{0}")]
    Mismatch(String),
    #[error("{0}")]
    Invalid(String),
    #[error("{0}: {1}")]
    Io(PathBuf, std::io::Error),
    #[error(transparent)]
    Knit(#[from] knit::Error),
}

impl CliError {
    pub fn file(path: &Path, line: usize, msg: impl Into<String>) -> Self {
        CliError::File {
            path: path.to_path_buf(),
            line,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub(crate) fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| CliError::Io(path.to_path_buf(), e))
}

pub(crate) fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::Io(path.to_path_buf(), e))
}
