use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("insufficient points: need at least {needed}, found {found}")]
    InsufficientPoints { needed: usize, found: usize },

    #[error("operation requires an organized (grid) point cloud")]
    RequiresOrganized,

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("empty result: {0}")]
    EmptyResult(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("missing state: {0}")]
    State(String),

    #[error("degenerate graph: {0}")]
    DegenerateGraph(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("memory bank is empty")]
    EmptyBank,

    #[error("cannot load {path}: {msg}")]
    Load { path: PathBuf, msg: String },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),

    #[error("training diverged at iteration {iteration} (loss {loss})")]
    TrainingDiverged { iteration: usize, loss: f64 },

    #[error("config error: {0}")]
    Config(String),

    /// Wraps a failure with the pipeline stage and sample that produced it.
    #[error("{stage} failed on sample '{sample}': {source}")]
    Stage {
        stage: &'static str,
        sample: String,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse failure classes, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_stage(self, stage: &'static str, sample: impl Into<String>) -> Self {
        Error::Stage {
            stage,
            sample: sample.into(),
            source: Box::new(self),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) | Error::InvalidSpec(_) => {
                ErrorClass::Config
            }
            Error::TrainingDiverged { .. }
            | Error::DegenerateGraph(_)
            | Error::UndefinedMetric(_)
            | Error::State(_) => ErrorClass::Numeric,
            Error::Stage { source, .. } => source.class(),
            _ => ErrorClass::Data,
        }
    }
}
