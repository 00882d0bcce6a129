use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("distance must be positive, got {0} m")]
    NonPositiveDistance(f64),
    #[error("PZT bias {v_pzt} V is at or beyond the contact bias {v0_pzt} V")]
    ContactOrBeyond { v_pzt: f64, v0_pzt: f64 },
    #[error("resonator destabilized: squared frequency {0} Hz^2 is not positive")]
    UnstableResonator(f64),
    #[error("invalid apparatus configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid sweep plan: {0}")]
    InvalidPlan(String),
    #[error("drift drove the gap to {0} m")]
    NegativeDistance(f64),
    #[error("need at least {needed} distinct points, got {got}")]
    InsufficientPoints { needed: usize, got: usize },
    #[error("singular normal equations")]
    DegenerateDesign,
    #[error("run contains no sweeps")]
    EmptyRun,
    #[error("singular Jacobian at the optimum")]
    SingularJacobian,
    #[error("contact bias estimate collided with the data ({v0_pzt} V <= {v_max} V)")]
    V0Collision { v0_pzt: f64, v_max: f64 },
    #[error("non-finite residual or Jacobian entry")]
    NonFiniteResidual,
    #[error("cannot seed power-law fit: {0}")]
    DegenerateSeries(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("line {line}, column {column}: {reason}")]
    Parse { line: usize, column: usize, reason: String },
    #[error("unsupported schema version {found} (expected {expected})")]
    SchemaVersionMismatch { found: String, expected: String },
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
