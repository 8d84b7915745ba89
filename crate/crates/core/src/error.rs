use thiserror::Error;

use crate::id::VariableId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("space mismatch: expected {expected}, found {found}")]
    SpaceMismatch { expected: String, found: String },

    #[error("form has rank {found}, operation requires rank {expected}")]
    RankMismatch { expected: usize, found: usize },

    #[error("malformed form: {0}")]
    MalformedForm(String),

    #[error("coefficient `{0}` is not bound")]
    UnboundCoefficient(String),

    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("invalid boundary condition: {0}")]
    InvalidBoundary(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("quadrature with {points} points is not exact for integrand degree {degree}")]
    QuadratureInsufficient { points: usize, degree: usize },

    #[error("singular matrix")]
    SingularMatrix,

    #[error("conjugate gradient did not converge in {iterations} iterations (relative residual {residual:e})")]
    CgNotConverged { iterations: usize, residual: f64 },

    #[error("Newton iteration did not converge in {iterations} iterations (residual {residual:e})")]
    NewtonNotConverged { iterations: usize, residual: f64 },

    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),

    #[error("dependency {0} is not on the tape (unannotated value?)")]
    DependencyNotFound(VariableId),

    #[error("tangent linear value of {0} is missing")]
    MissingTangentValue(VariableId),

    #[error("diagonal block of {0} depends on its own target")]
    SelfDependentDiagonal(VariableId),

    #[error("variable {0} is not on the tape")]
    UnknownVariable(VariableId),

    #[error("forward value of {0} is not available")]
    MissingForwardValue(VariableId),

    #[error("adjoint value of {0} is not available")]
    MissingAdjointValue(VariableId),

    #[error("parameter `{0}` is already registered")]
    DuplicateParameter(String),

    #[error("control `{0}` does not appear on the tape")]
    ControlNotOnTape(String),

    #[error("no equation since the last timestep boundary")]
    EmptyTimestep,

    #[error("checkpoint schedule covers {schedule} steps but the tape has {tape}")]
    ScheduleMismatch { schedule: usize, tape: usize },

    #[error("checkpoint schedule is invalid: {0}")]
    InvalidSchedule(String),

    #[error("functional evaluated to a non-finite value")]
    NonFinite,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
