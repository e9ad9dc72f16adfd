use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum VidimError {
    #[error(transparent)]
    Core(#[from] vidim_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("path error: {0}")]
    Path(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, VidimError>;

impl VidimError {
    /// 1 for usage and configuration problems, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            VidimError::Usage(_) | VidimError::Config(_) | VidimError::Core(vidim_core::Error::Config(_)) => 1,
            _ => 2,
        }
    }
}

pub(crate) trait IoContext<T> {
    fn at(self, path: &Path) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: &Path) -> Result<T> {
        self.map_err(|source| VidimError::Io { path: path.to_path_buf(), source })
    }
}
