use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum QsaError {
    #[error("duplicate ratio {numerator}/{denominator} in logarithmic frequency construction")]
    DuplicateRatio { numerator: f64, denominator: f64 },

    #[error("frequencies are not rationally independent: integer combination {combination:?} vanishes")]
    DependentFrequencies { combination: Vec<i64> },

    #[error("{what} must be positive, got {value}")]
    NonPositive { what: &'static str, value: f64 },

    #[error("harmonic multipliers must be strictly increasing positive integers")]
    NonIncreasingMultipliers,

    #[error("coordinates {first} and {second} share frequency {omega}")]
    SharedFrequency { first: usize, second: usize, omega: f64 },

    #[error("probe coordinate {coordinate} contains a zero-frequency term")]
    ZeroFrequencyTerm { coordinate: usize },

    #[error("objective value {value} is below the lower bound {lower_bound}")]
    NegativeUnderRoot { value: f64, lower_bound: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("field is not differentiable at the projection boundary")]
    NonDifferentiable,

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },

    #[error("step too coarse: {detail}")]
    StepTooCoarse { detail: String },

    #[error("averaging window is empty: {detail}")]
    WindowEmpty { detail: String },

    #[error("too few samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("degenerate fit: {detail}")]
    DegenerateFit { detail: String },

    #[error("no closed form is available for this field")]
    NoClosedForm,

    #[error("Markov chain is reducible or has no unique invariant distribution")]
    Reducible,

    #[error("trajectory diverged at t = {t} with norm {norm}")]
    Diverged { t: f64, norm: f64 },

    #[error("matrix is not symmetric positive definite")]
    NotSpd,

    #[error("matrix is not Hurwitz (max real part of eigenvalues {max_real_part})")]
    NotHurwitz { max_real_part: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for QsaError {
    fn from(e: std::io::Error) -> Self {
        QsaError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, QsaError>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(QsaError::DimensionMismatch { expected, got });
    }
    Ok(())
}

pub(crate) fn check_positive(what: &'static str, value: f64) -> Result<()> {
    if !(value > 0.0) || !value.is_finite() {
        return Err(QsaError::NonPositive { what, value });
    }
    Ok(())
}
