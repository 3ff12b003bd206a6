use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("grid mismatch: fields live on different grids")]
    GridMismatch,

    #[error("unstable regime: mu ({mu}) must exceed gamma ({gamma})")]
    UnstableRegime { gamma: f64, mu: f64 },

    #[error("no solitary wave: nu + eps*mu*sin(2 theta) = {0} is not positive")]
    NoWave(f64),

    #[error("under-resolved grid: {points_per_width:.2} points per soliton width (need >= {required})")]
    Resolution { points_per_width: f64, required: f64 },

    #[error("box too small: wave magnitude {value:.3e} at the boundary exceeds {limit:.0e}")]
    BoxTooSmall { value: f64, limit: f64 },

    #[error("blow-up at t = {t}: {reason}")]
    BlowUp { t: f64, reason: String },

    #[error("discretization error: {0}")]
    Discretization(String),

    #[error("degenerate spectrum: {0}")]
    DegenerateSpectrum(String),

    #[error("noise coupling broken: expected increment #{expected}, got #{got}")]
    Coupling { expected: u64, got: u64 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("shift {shift} exceeds a quarter of the box ({limit})")]
    ShiftTooLarge { shift: f64, limit: f64 },

    #[error("unknown {kind} '{name}' (known: {known})")]
    UnknownStrategy { kind: &'static str, name: String, known: String },

    #[error("linear algebra failure: {0}")]
    LinearAlgebra(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable process exit code: 1 runtime, 2 config, 3 blow-up.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::BlowUp { .. } => 3,
            Error::InvalidArgument(_)
            | Error::UnstableRegime { .. }
            | Error::NoWave(_)
            | Error::Resolution { .. }
            | Error::BoxTooSmall { .. }
            | Error::UnknownStrategy { .. }
            | Error::ShiftTooLarge { .. }
            | Error::Config(_) => 2,
            _ => 1,
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
