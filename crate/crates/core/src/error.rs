use alloc::string::String;

/// Errors raised by the models, the calibration engine and the solvers.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("parameter `{name}` out of domain: {detail}")]
    Parameter { name: &'static str, detail: String },

    #[error("stage {stage}: no outer-scan minimum below threshold within scope")]
    NoMinimum { stage: usize },

    #[error("stage {stage}: scan does not cover the required phase scope")]
    InsufficientScope { stage: usize },

    #[error("phase unwrap failed at sample {index}")]
    UnwrapFailure { index: usize },

    #[error("line fit needs at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },

    #[error("stage {stage}: fitted slope {k} rad/mW is not positive")]
    NonPositiveSlope { stage: usize, k: f64 },

    #[error("stage {stage}: passes disagree on k ({first} vs {second} rad/mW)")]
    PassInconsistency {
        stage: usize,
        first: f64,
        second: f64,
    },

    #[error("stage {stage}: no branch satisfies |dtheta| < pi/2 (candidates {zero}, {pi})")]
    ConstraintViolation { stage: usize, zero: f64, pi: f64 },

    #[error(
        "stage {stage}: a theta(P_min) hint is required without the |dtheta| < pi/2 constraint"
    )]
    MissingHint { stage: usize },

    #[error("stage {stage}: probe intensity {intensity} matches no discriminator band")]
    Ambiguous { stage: usize, intensity: f64 },

    #[error(
        "linear solver stopped after {iterations} iterations at relative residual {residual:e}"
    )]
    SolverDiverged { iterations: usize, residual: f64 },
}

impl Error {
    pub(crate) fn param(name: &'static str, detail: impl Into<String>) -> Self {
        Error::Parameter {
            name,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = core::result::Result<T, Error>;
