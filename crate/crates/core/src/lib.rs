//! Discrete adjoint and tangent-linear models for transient finite-element
//! problems, built from an annotated record of equation solves.

pub mod checkpoint;
pub mod error;
pub mod fem;
pub mod gradients;
pub mod id;
pub mod models;
pub mod symbolics;
pub mod tape;

pub use error::{Error, Result};
pub use id::VariableId;
pub use checkpoint::{CheckpointCounters, CheckpointPolicy, Schedule};
pub use fem::{DirichletBC, FunctionValue, Mesh1D, SolveMode, SolverConfig};
pub use gradients::{
    compute_adjoint, compute_gradient, compute_tlm, evaluate_functional, tlm_derivative,
    ControlParameter, Functional, Gradient, TaylorMode, TaylorReport, TimeMeasure,
};
pub use models::{ControlKind, Model, ModelConfig, ModelKind, RunReport};
pub use symbolics::{CoeffId, CoefficientRef, Family, FormExpr, Space};
pub use tape::{Guess, Tape, TapeCounters};
