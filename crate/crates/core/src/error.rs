use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {field}: {msg}")]
    Config { field: String, msg: String },

    #[error("manifest row {row}: {msg}")]
    Manifest { row: usize, msg: String },

    #[error("no records")]
    NoRecords,

    #[error("provider error for sample {sample}: {msg}")]
    Provider { sample: String, msg: String },

    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    Shape {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("missing artifact {}: run `{command}` first", path.display())]
    MissingArtifact { path: PathBuf, command: String },

    #[error("stale or mixed inputs: {0} (pass --force to override)")]
    MixedInputs(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("corrupt archive {}: {msg}", path.display())]
    Archive { path: PathBuf, msg: String },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("image export failed: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line frontend.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::MissingArtifact { .. } | Error::MixedInputs(_) => 3,
            Error::Numerical(_) => 4,
            _ => 1,
        }
    }
}
