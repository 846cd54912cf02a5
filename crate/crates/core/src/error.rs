use std::path::PathBuf;

use bevda_grad::GradError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed file: {reason}")]
    MalformedFile { path: PathBuf, reason: String },
    #[error("line {line}: expected 15 or 16 fields, found {fields}")]
    MalformedLine { line: usize, fields: usize },
    #[error("line {line}: cannot parse field {field} ({text:?})")]
    Parse {
        line: usize,
        field: usize,
        text: String,
    },
    #[error("could not place {class} after {attempts} attempts")]
    Placement { class: &'static str, attempts: usize },
    #[error("point {index} has no semantic class")]
    MissingSemantics { index: usize },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}: {dump}")]
    NonFiniteLoss { step: usize, dump: String },
    #[error("image encoding failed: {0}")]
    Image(String),
    #[error(transparent)]
    Grad(#[from] GradError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io {
            path: path.into(),
            source,
        })
    }
}
