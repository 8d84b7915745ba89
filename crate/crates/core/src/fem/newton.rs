use nalgebra::DVector;

use super::{
    apply_bc, apply_bc_rhs, assemble_matrix, assemble_vector, solve_constrained_matfree, Bindings,
    DirichletBC, FunctionValue, LuFactor, Mesh1D, SolveMode, SolverConfig,
};
use crate::error::{Error, Result};
use crate::symbolics::{gateaux_derivative, CoefficientRef, FormExpr};

#[derive(Debug, Clone)]
pub struct NewtonReport {
    pub value: FunctionValue,
    /// Newton updates performed; also the number of linear solves.
    pub iterations: usize,
    /// Residual norm before each update and after the last one.
    pub residual_norms: Vec<f64>,
}

/// Newton iteration for `residual(unknown) = 0`, with the Jacobian derived
/// symbolically. At least one update is always taken. Dirichlet values are
/// imposed on the initial guess and corrections are homogeneous there.
#[allow(clippy::too_many_arguments)]
pub fn solve_newton(
    residual: &FormExpr,
    unknown: &CoefficientRef,
    init: FunctionValue,
    bc: Option<&DirichletBC>,
    t: f64,
    mesh: &Mesh1D,
    bindings: &Bindings,
    config: &SolverConfig,
) -> Result<NewtonReport> {
    config.validate()?;
    if residual.rank()? != 1 {
        return Err(Error::RankMismatch {
            expected: 1,
            found: residual.rank()?,
        });
    }
    let jacobian = gateaux_derivative(residual, unknown, &FormExpr::trial(unknown.space))?;

    let mut u = init;
    if u.space != unknown.space {
        return Err(Error::SpaceMismatch {
            expected: unknown.space.to_string(),
            found: u.space.to_string(),
        });
    }
    if let Some(bc) = bc {
        apply_bc_rhs(&mut u.values, bc, mesh, t, false);
    }
    let mut bound = bindings.clone();
    let mut norms = Vec::new();
    let mut iterations = 0;
    loop {
        bound.insert(unknown.id.clone(), u.clone());
        let mut f = assemble_vector(residual, mesh, &bound)?;
        if let Some(bc) = bc {
            apply_bc_rhs(&mut f, bc, mesh, t, true);
        }
        let norm = f.norm();
        if !norm.is_finite() {
            return Err(Error::NonFinite);
        }
        norms.push(norm);
        let converged = norm <= config.newton_atol || norm <= config.newton_rtol * norms[0];
        if iterations > 0 && converged {
            return Ok(NewtonReport {
                value: u,
                iterations,
                residual_norms: norms,
            });
        }
        if iterations == config.newton_max_iter {
            return Err(Error::NewtonNotConverged {
                iterations,
                residual: norm,
            });
        }
        let mut j = assemble_matrix(&jacobian, mesh, &bound)?;
        let mut rhs: DVector<f64> = -f;
        let du = match config.mode {
            SolveMode::Direct => {
                if let Some(bc) = bc {
                    apply_bc(&mut j, &mut rhs, bc, mesh, t, true);
                }
                LuFactor::new(j)?.solve(&rhs)?
            }
            SolveMode::MatrixFree => {
                let fixed: Vec<(usize, f64)> = bc
                    .map(|bc| bc.nodes().iter().map(|&n| (n, 0.0)).collect())
                    .unwrap_or_default();
                solve_constrained_matfree(|v| Ok(&j * v), &rhs, &fixed, config)?.0
            }
        };
        u.values += du;
        if let Some(bc) = bc {
            // Pivoting may leave roundoff in the identity rows.
            apply_bc_rhs(&mut u.values, bc, mesh, t, false);
        }
        iterations += 1;
    }
}
