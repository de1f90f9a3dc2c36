use thiserror::Error;

/// Errors raised anywhere in the modelling pipeline.
///
/// The variants are grouped so the CLI can map them onto exit codes:
/// data/validation problems versus numerical failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("bad snapshot file: {0}")]
    Format(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },

    #[error("integration blew up at t = {time}")]
    BlowUp { time: f64 },

    #[error("singular jacobian: {0}")]
    SingularJacobian(String),

    #[error("newton did not converge after {iterations} iterations (residual trace {trace:?})")]
    NewtonFailure { iterations: usize, trace: Vec<f64> },

    #[error("no periodic orbit: {0}")]
    Collapse(String),

    #[error("continuation step size fell below floor {floor:e}")]
    StepFloor { floor: f64 },
}

impl Error {
    pub(crate) fn dim(context: &'static str, expected: usize, got: usize) -> Self {
        Error::Dimension {
            context,
            expected,
            got,
        }
    }

    /// True for failures of a numerical procedure, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Divergence { .. }
                | Error::BlowUp { .. }
                | Error::SingularJacobian(_)
                | Error::NewtonFailure { .. }
                | Error::Collapse(_)
                | Error::StepFloor { .. }
                | Error::NonFinite(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
