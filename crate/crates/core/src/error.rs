use std::path::PathBuf;

/// Coarse failure category. The command-line front end maps these onto
/// process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Config,
    Data,
    Numeric,
    Io,
}

impl Category {
    pub fn as_str(self) -> &'static str {
        match self {
            Category::Config => "config",
            Category::Data => "data",
            Category::Numeric => "numeric",
            Category::Io => "io",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("data error: {0}")]
    Data(String),

    #[error("corrupt image {}: {reason}", .path.display())]
    CorruptImage { path: PathBuf, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn category(&self) -> Category {
        match self {
            Error::Config(_) => Category::Config,
            Error::Shape { .. } | Error::InvalidArgument(_) => Category::Config,
            Error::NonFinite(_) => Category::Numeric,
            Error::MissingFile(_) | Error::Data(_) | Error::CorruptImage { .. } => Category::Data,
            Error::Checkpoint(_) => Category::Data,
            Error::Io { .. } => Category::Io,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
