use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("excitation error: no input of length {len} persistently exciting of order {order} after {attempts} attempts")]
    Excitation {
        len: usize,
        order: usize,
        attempts: usize,
    },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("oracle unavailable: {0}")]
    OracleUnavailable(String),

    /// The S-lemma bound is infeasible below the configured cap.
    #[error("unbounded constant `{label}`: no certificate with sigma^2 <= {cap:e}")]
    UnboundedConstant { label: String, cap: f64 },

    #[error("tolerance not reached: {0}")]
    Tolerance(String),

    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("horizon error: L = {horizon} must be at least n = {order}")]
    Horizon { horizon: usize, order: usize },

    #[error("model error: {0}")]
    Model(String),

    /// The optimal control problem at the measured state has no solution.
    #[error("OCP infeasible at state {state:?} (most violated row: {worst_row:?})")]
    Infeasible {
        state: Vec<f64>,
        worst_row: Option<usize>,
    },

    #[error("QP solver stopped after {iterations} iterations without converging")]
    MaxIterations { iterations: usize },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
