use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] pjfit_core::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// A malformed line in a record or vocabulary file; `line` is 1-based.
    #[error("{}:{line}: {message}", path.display())]
    Parse { path: PathBuf, line: usize, message: String },
    /// A binary artifact that is truncated, corrupt or of another version.
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Self::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by bad input rather than by the run itself.
    pub fn is_validation(&self) -> bool {
        match self {
            Self::Core(e) => matches!(
                e,
                pjfit_core::Error::Validation(_)
                    | pjfit_core::Error::Config(_)
                    | pjfit_core::Error::Lookup(_)
                    | pjfit_core::Error::OutOfRange { .. }
            ),
            Self::Parse { .. } | Self::Format { .. } => true,
            // A missing input is bad input; other IO failures are runtime errors.
            Self::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
        }
    }
}
