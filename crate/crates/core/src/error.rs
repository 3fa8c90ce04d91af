use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("section partition is invalid: {0}")]
    Partition(String),

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("invalid design: {0}")]
    InvalidDesign(String),

    /// Semantic violation in a model or config description, with the field path.
    #[error("{field}: {message}")]
    InvalidModel { field: String, message: String },

    #[error("stiffness matrix is singular or indefinite (pivot at reduced dof {pivot})")]
    SingularSystem { pivot: usize },

    #[error("system has no free degrees of freedom")]
    EmptySystem,

    #[error("no positive buckling eigenvalue found")]
    NoBucklingMode,

    #[error("eigensolver failed: {0}")]
    EigenSolver(String),

    #[error("rayleigh quotient denominator is zero")]
    DegenerateMode,

    #[error(
        "thickness step {delta_t} on section {section} drives thickness {thickness} non-positive"
    )]
    StepTooLarge {
        section: usize,
        thickness: f64,
        delta_t: f64,
    },

    #[error("no section is eligible for a move")]
    EmptyMoveSet,

    #[error("initial design is infeasible and every section is at its upper bound")]
    InfeasibleProblem,

    #[error("parse error at {context}: {message}")]
    Parse { context: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn field(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidModel {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Errors raised by the numerical pipeline rather than by bad input.
    pub fn is_solver_error(&self) -> bool {
        matches!(
            self,
            Error::SingularSystem { .. }
                | Error::EmptySystem
                | Error::NoBucklingMode
                | Error::EigenSolver(_)
                | Error::DegenerateMode
                | Error::StepTooLarge { .. }
                | Error::EmptyMoveSet
                | Error::InfeasibleProblem
        )
    }
}
