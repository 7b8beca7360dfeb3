use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid spec: {0}")]
    Config(String),

    #[error("data: {0}")]
    Data(String),

    #[error("{} already exists; pass --force to overwrite", .0.display())]
    Exists(PathBuf),

    #[error("replay diverged: {0}")]
    Replay(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] ifsd_core::Error),
}

impl CliError {
    /// Process exit code: 2 for configuration, 3 for data and 4 for
    /// numeric failures; everything else is 1.
    pub fn exit_code(&self) -> i32 {
        use ifsd_core::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Core(e) => match e {
                E::Config(_) => 2,
                E::NonFinite { .. } => 4,
                E::InvalidBox { .. }
                | E::DuplicateClass(_)
                | E::NonContiguousClass { .. }
                | E::MissingDistillTarget { .. }
                | E::Empty(_)
                | E::Data(_)
                | E::Checkpoint(_)
                | E::Json(_) => 3,
                E::Io(_) => 1,
            },
            CliError::Exists(_) | CliError::Replay(_) | CliError::Io { .. } => 1,
        }
    }
}

pub(crate) trait IoContext<T> {
    fn at(self, path: &std::path::Path) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: &std::path::Path) -> Result<T> {
        self.map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}
