use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor extent does not match what an operation expects.
    #[error("dimension mismatch on {axis}: expected {expected}, got {actual} ({context})")]
    Dimension {
        axis: &'static str,
        expected: usize,
        actual: usize,
        context: String,
    },

    #[error("shape error: {0}")]
    Shape(String),

    /// A caller broke an API precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("batch has no labeled pixels")]
    EmptySupervision,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error in {what} at byte {offset}: {reason}")]
    Format {
        what: &'static str,
        offset: usize,
        reason: String,
    },

    #[error("parse error at line {line}, field `{field}`: {reason}")]
    Parse {
        line: usize,
        field: String,
        reason: String,
    },

    #[error("class {class} has {available} labeled pixels, split needs {required}")]
    UnderPopulatedClass {
        class: u16,
        available: usize,
        required: usize,
    },

    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),

    #[error("non-finite loss at {stage} (epoch {epoch}, iteration {iteration}): {value}")]
    Divergence {
        stage: &'static str,
        epoch: usize,
        iteration: usize,
        value: f64,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(axis: &'static str, expected: usize, actual: usize, context: impl Into<String>) -> Self {
        Error::Dimension {
            axis,
            expected,
            actual,
            context: context.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
