use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("correlation matrix is not positive semi-definite (pivot {pivot} = {value:e})")]
    NotPositiveSemiDefinite { pivot: usize, value: f64 },

    #[error("strategy `{strategy}` returned non-finite volume {value} on path {path} at step {step}")]
    NonFiniteStrategy {
        strategy: String,
        path: usize,
        step: usize,
        value: f64,
    },

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("config `{path}`: {reason}")]
    Config { path: String, reason: String },

    #[error("weight file: {0}")]
    WeightFormat(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of numerical procedures (calibration, Cholesky,
    /// divergence, non-finite outputs) as opposed to bad input or I/O.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Calibration(_)
                | Error::NotPositiveSemiDefinite { .. }
                | Error::NonFiniteStrategy { .. }
                | Error::Diverged { .. }
        )
    }
}

pub(crate) fn ensure_finite(name: &'static str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::invalid(name, format!("must be finite, got {value}")))
    }
}
