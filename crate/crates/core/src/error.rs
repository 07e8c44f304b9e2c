use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidShape { op: &'static str, msg: String },

    #[error("depthwise_conv: unsupported kernel size {kh}x{kw} (expected 1x1 or 3x3)")]
    UnsupportedKernel { kh: usize, kw: usize },

    #[error("{op}: extent {extent} is not divisible by {by}")]
    NotDivisible {
        op: &'static str,
        extent: usize,
        by: usize,
    },

    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("build_mixed_kv: decoder output for stage {0} is missing")]
    MissingDecoderOutput(usize),

    #[error("flop counting requires an instrumented tape")]
    InstrumentationDisabled,

    #[error("sweep: configuration list is empty")]
    EmptySweep,

    #[error("config: {field}: {msg}")]
    Config { field: String, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed SCAT file: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("stage {stage}: {source}")]
    Stage {
        stage: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at_stage(self, stage: usize) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// True for errors caused by a bad configuration rather than a runtime fault.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config { .. } | Error::EmptySweep => true,
            Error::Stage { source, .. } => source.is_config(),
            _ => false,
        }
    }
}
