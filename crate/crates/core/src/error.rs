use thiserror::Error;

/// Errors surfaced by the library.
///
/// The variants are grouped so the CLI can map them onto exit codes:
/// invalid input is a usage problem, numerical failures are reported
/// separately from I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("step size underflow at t = {t:.6e} (h = {h:.3e}) after {steps} accepted steps")]
    StepUnderflow { t: f64, h: f64, steps: usize },

    #[error("ODE step budget of {max_steps} exhausted at t = {t:.6e}")]
    TooManySteps { t: f64, max_steps: usize },

    #[error("quadrature grid too coarse: log Z moved by {delta:.3e} on refinement")]
    GridTooCoarse { delta: f64 },

    #[error("quadrature grid misses {missing:.3e} of the mass")]
    GridTooSmall { missing: f64 },

    #[error("training diverged at iteration {iteration}: {detail}")]
    Diverged { iteration: usize, detail: String },

    #[error("all weights are zero")]
    ZeroWeights,

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures caused by the numerics rather than the inputs or the filesystem.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_)
                | Error::StepUnderflow { .. }
                | Error::TooManySteps { .. }
                | Error::GridTooCoarse { .. }
                | Error::Diverged { .. }
                | Error::ZeroWeights
        )
    }

    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_) | Error::Json(_) | Error::Csv(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
