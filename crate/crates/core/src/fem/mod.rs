//! Assembly of forms on a uniform 1D P1 mesh, Dirichlet conditions, and
//! linear and nonlinear solvers.

mod assemble;
mod bc;
mod function;
mod mesh;
mod newton;
mod solve;

pub use assemble::{
    assemble, assemble_matrix, assemble_scalar, assemble_vector, assemble_with, Assembled,
    AssemblyOptions, Bindings, Quadrature,
};
pub use bc::{apply_bc, apply_bc_rhs, DirichletBC};
pub use function::{space_dim, FunctionValue};
pub use mesh::Mesh1D;
pub use newton::{solve_newton, NewtonReport};
pub use solve::{
    solve_constrained_matfree, solve_linear, solve_linear_matfree, CgStats, LuFactor, SolveMode,
    SolverConfig,
};
