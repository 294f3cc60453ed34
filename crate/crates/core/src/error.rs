use thiserror::Error;

use crate::arch::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("shape error in {op}: {msg}")]
    Shape { op: &'static str, msg: String },

    #[error("non-finite value encountered in {op}")]
    NonFinite { op: &'static str },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("invalid genotype: {}", format_violations(.0))]
    InvalidGenotype(Vec<Violation>),

    #[error("infeasible budget: {budget} MACs is below the cheapest path ({minimum} MACs)")]
    InfeasibleBudget { budget: u64, minimum: u64 },

    #[error("non-finite loss {loss} at iteration {iteration}")]
    NonFiniteLoss { iteration: u64, loss: f64 },

    #[error("non-finite fitness for path {path}")]
    NonFiniteFitness { path: String },

    #[error("bad file format: {0}")]
    Format(String),

    #[error("unsupported {what} version {found} (expected {expected})")]
    Version {
        what: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("parameter {name}: shape {found:?} does not match model shape {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("missing parameter {0}")]
    MissingParam(String),

    #[error("dataset mismatch: {0}")]
    DatasetMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable name of the error kind.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "DIMENSION",
            Error::Shape { .. } => "SHAPE",
            Error::NonFinite { .. } => "NON_FINITE",
            Error::Contract(_) => "CONTRACT",
            Error::UndefinedCorrelation(_) => "UNDEFINED_CORRELATION",
            Error::InvalidGenotype(v) => v.first().map_or("INVALID_GENOTYPE", |x| x.code.as_str()),
            Error::InfeasibleBudget { .. } => "INFEASIBLE_BUDGET",
            Error::NonFiniteLoss { .. } => "NON_FINITE_LOSS",
            Error::NonFiniteFitness { .. } => "NON_FINITE_FITNESS",
            Error::Format(_) => "FORMAT",
            Error::Version { .. } => "VERSION",
            Error::ParamShape { .. } => "PARAM_SHAPE",
            Error::MissingParam(_) => "MISSING_PARAM",
            Error::DatasetMismatch(_) => "DATASET_MISMATCH",
            Error::Io(_) => "IO",
            Error::Json(_) => "JSON",
        }
    }
}

fn format_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|x| format!("{}: {}", x.code.as_str(), x.message))
        .collect::<Vec<_>>()
        .join("; ")
}

pub(crate) fn shape_err(op: &'static str, msg: impl Into<String>) -> Error {
    Error::Shape {
        op,
        msg: msg.into(),
    }
}
