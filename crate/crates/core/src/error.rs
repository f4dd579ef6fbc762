use thiserror::Error;

pub type Result<T, E = PawsError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum PawsError {
    /// Operand shapes do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// Argument outside the domain of the operation (non-positive temperature, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Input data violates a documented precondition.
    #[error("validation error: {0}")]
    Validation(String),

    /// Configuration is infeasible or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// A graph builder produced different values on repeated evaluation.
    #[error("determinism error: {0}")]
    Determinism(String),

    /// A stated precondition of a verification check is not met.
    #[error("precondition error: {0}")]
    Precondition(String),

    /// Malformed checkpoint or data file.
    #[error("format error: {0}")]
    Format(String),

    /// Training diverged.
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl PawsError {
    /// True for errors caused by bad user input rather than a failure at run time.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            PawsError::Shape(_)
                | PawsError::Domain(_)
                | PawsError::Validation(_)
                | PawsError::Config(_)
                | PawsError::Precondition(_)
        )
    }
}
