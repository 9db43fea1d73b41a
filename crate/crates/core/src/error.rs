//! Error type shared by every module of the workbench.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error(
        "packing failure: could not place {numerosity} disjoint objects within {attempts} attempts"
    )]
    PackingFailure { numerosity: usize, attempts: usize },

    #[error("asset error: {0}")]
    Asset(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("missing images: {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    MissingImage(Vec<PathBuf>),

    #[error("unknown layer: {0}")]
    UnknownLayer(String),

    #[error("weights error: {0}")]
    Weights(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("numerical divergence: {0}")]
    Divergence(String),

    #[error("area unavailable: {0}")]
    AreaUnavailable(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Divergence(_) => 4,
            _ => 3,
        }
    }
}
