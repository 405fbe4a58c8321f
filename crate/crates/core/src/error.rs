use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// The matrix handed to a polar projection has no unique nearest group
    /// element (smallest singular value below the relative rank tolerance).
    #[error("matrix is rank deficient (s_min / s_max = {ratio:.3e})")]
    RankDeficient { ratio: f64 },

    #[error("matrix has non-finite entries")]
    NonFinite,

    #[error("invalid value for `{name}`: {constraint}")]
    InvalidParam { name: &'static str, constraint: String },

    /// Subspace iteration did not reach the residual tolerance.
    #[error("eigensolver did not converge after {iterations} iterations (residual {residual:.3e})")]
    EigenFailure { iterations: usize, residual: f64 },

    /// The prior recursion has no real solution, or a leading block became
    /// numerically singular.
    #[error("prior parameters are infeasible: {0}")]
    InfeasibleParams(String),

    /// `Tr(F B2^{-1} F^T)` differs from its closed form.
    #[error("information identity violated: computed {computed}, expected {expected}")]
    IdentityViolation { computed: f64, expected: f64 },

    #[error("malformed instance document: {0}")]
    Document(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, constraint: impl Into<String>) -> Self {
        Error::InvalidParam {
            name,
            constraint: constraint.into(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Document(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}
