use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("constraint error: {0}")]
    Constraint(String),
    #[error("covariate values outside the declared support at indices {indices:?}")]
    Domain { indices: Vec<usize> },
    #[error("undefined: {0}")]
    Undefined(String),
    #[error("degenerate effect: reference variance {0:e} is not positive")]
    DegenerateEffect(f64),
    #[error("degenerate split '{0}': parent variance is zero")]
    DegenerateSplit(String),
    #[error("boundary value: {0}")]
    Boundary(String),
    #[error("infeasible calibration: alpha = {alpha} must exceed sqrt(U) = {bound}")]
    Infeasible { alpha: f64, bound: f64 },
    #[error("specification error: {0}")]
    Specification(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("diagnostic error: {0}")]
    Diagnostic(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    /// Short machine-readable category name.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Validation(_) => "validation",
            Error::Constraint(_) => "constraint",
            Error::Domain { .. } => "domain",
            Error::Undefined(_) => "undefined",
            Error::DegenerateEffect(_) => "degenerate_effect",
            Error::DegenerateSplit(_) => "degenerate_split",
            Error::Boundary(_) => "boundary",
            Error::Infeasible { .. } => "infeasible",
            Error::Specification(_) => "specification",
            Error::Numerical(_) => "numerical",
            Error::Diagnostic(_) => "diagnostic",
            Error::Data(_) => "data",
            Error::Io(_) => "io",
            Error::Config(_) => "config",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
