use std::io;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] kvfreeze_core::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("config: {0}")]
    Config(String),
    /// Malformed input file: metrics, trace or spill.
    #[error("{path}: line {line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("{0}")]
    Usage(String),
}

impl HarnessError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Invariant violations map to exit code 2; everything else is the
    /// caller's input.
    pub fn is_internal(&self) -> bool {
        matches!(self, Self::Core(e) if e.is_internal())
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
