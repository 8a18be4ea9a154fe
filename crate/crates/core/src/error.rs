use alloc::string::String;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("spin quantum number must be a positive half-integer, got {0}")]
    InvalidSpin(f64),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("index {index} out of range for {len} factors")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("matrix is not Hermitian (residual {residual:e})")]
    NotHermitian { residual: f64 },
    #[error("pure-state evolution requested with cavity dissipation kappa = {0}")]
    PureStateWithDissipation(f64),
    #[error("integrator step {dt} exceeds segment duration {duration}")]
    StepExceedsSegment { dt: f64, duration: f64 },
    #[error("invalid coupling schedule: {0}")]
    InvalidSchedule(String),
    #[error("numerical abort at t = {time}: {what} = {value:e}")]
    NumericalAbort { what: &'static str, time: f64, value: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("episode already finished")]
    EpisodeDone,
    #[error("replay buffer holds {have} transitions, {need} required")]
    BufferUnderfull { have: usize, need: usize },
    #[error("stale or mismatched forward cache")]
    StaleCache,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    /// True for failures caused by the numerics (trace, positivity, NaN)
    /// rather than by bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NumericalAbort { .. } | Error::NonFinite(_))
    }
}
