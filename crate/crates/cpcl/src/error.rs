use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: malformed file: {reason}", path.display())]
    Format { path: PathBuf, reason: String },
    #[error("{}: {source}", path.display())]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{}: {source}", path.display())]
    Corpus { path: PathBuf, source: cpcl_core::Error },
    #[error(transparent)]
    Core(#[from] cpcl_core::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    pub(crate) fn json(path: impl Into<PathBuf>) -> impl FnOnce(serde_json::Error) -> Error {
        let path = path.into();
        move |source| Error::Json { path, source }
    }

    pub(crate) fn at(path: impl Into<PathBuf>) -> impl FnOnce(cpcl_core::Error) -> Error {
        let path = path.into();
        move |source| Error::Corpus { path, source }
    }

    /// The core error underneath, if any.
    pub fn core(&self) -> Option<&cpcl_core::Error> {
        match self {
            Error::Corpus { source, .. } | Error::Core(source) => Some(source),
            _ => None,
        }
    }
}
