use std::fmt;
use std::io;
use std::path::Path;

use g2p::G2pError;

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_MISSING_FILE: i32 = 4;

#[derive(Debug)]
pub enum CliError {
    /// Bad command line.
    Usage(String),
    /// Malformed or invalid configuration.
    Config(String),
    /// A file that could not be opened.
    Missing { path: String, source: io::Error },
    /// Library error with the file or word it concerns.
    Core { context: Option<String>, source: G2pError },
    /// Words that could not be converted.
    Rejected(usize),
}

impl CliError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        match source.kind() {
            io::ErrorKind::NotFound | io::ErrorKind::PermissionDenied | io::ErrorKind::IsADirectory => {
                CliError::Missing {
                    path: path.display().to_string(),
                    source,
                }
            }
            _ => CliError::Core {
                context: Some(path.display().to_string()),
                source: G2pError::Io(source),
            },
        }
    }

    /// Attaches a file name, turning unreadable files into [`CliError::Missing`].
    pub fn at(path: &Path) -> impl FnOnce(G2pError) -> Self + '_ {
        move |e| match e {
            G2pError::Io(io) => CliError::io(path, io),
            source => CliError::Core {
                context: Some(path.display().to_string()),
                source,
            },
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => EXIT_USAGE,
            CliError::Missing { .. } => EXIT_MISSING_FILE,
            CliError::Rejected(_) => EXIT_DATA,
            CliError::Core { source, .. } => match source {
                G2pError::Config(_) => EXIT_USAGE,
                G2pError::NonFinite(_) | G2pError::Contract(_) => EXIT_NUMERIC,
                _ => EXIT_DATA,
            },
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Missing { path, source } => write!(f, "cannot open {path}: {source}"),
            CliError::Core { context: Some(c), source } => write!(f, "{c}: {source}"),
            CliError::Core { context: None, source } => write!(f, "{source}"),
            CliError::Rejected(n) => write!(f, "{n} word(s) could not be converted"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<G2pError> for CliError {
    fn from(source: G2pError) -> Self {
        match source {
            G2pError::Io(io) => CliError::Core {
                context: None,
                source: G2pError::Io(io),
            },
            source => CliError::Core { context: None, source },
        }
    }
}
