use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    Axis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("backward: loss must have exactly one element, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward: loss is not attached to a recording tape")]
    Detached,
    #[error("{0}")]
    Invalid(String),
    #[error("ode solver exceeded {max_steps} steps on segment [{t0}, {t1}]")]
    StepLimit { max_steps: usize, t0: f64, t1: f64 },
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("malformed data: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable code for diagnostics: `error: <code>: <message>`.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape { .. } | Error::Axis { .. } => "shape",
            Error::NotScalar(_) | Error::Detached => "autodiff",
            Error::Invalid(_) => "invalid",
            Error::StepLimit { .. } | Error::NonFinite(_) => "solver",
            Error::Format(_) => "format",
            Error::Io { .. } => "io",
        }
    }

    /// True for failures raised by numerical integration.
    pub fn is_solver_failure(&self) -> bool {
        matches!(self, Error::StepLimit { .. } | Error::NonFinite(_))
    }
}
