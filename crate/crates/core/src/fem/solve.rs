use nalgebra::{DMatrix, DVector, Dyn, LU};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveMode {
    #[default]
    Direct,
    MatrixFree,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub mode: SolveMode,
    pub cg_rtol: f64,
    pub cg_max_iter: usize,
    pub newton_atol: f64,
    pub newton_rtol: f64,
    pub newton_max_iter: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            mode: SolveMode::Direct,
            cg_rtol: 1e-12,
            cg_max_iter: 10_000,
            newton_atol: 1e-10,
            newton_rtol: 1e-9,
            newton_max_iter: 50,
        }
    }
}

impl SolverConfig {
    pub fn matrix_free() -> Self {
        Self {
            mode: SolveMode::MatrixFree,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.cg_rtol, self.newton_atol, self.newton_rtol];
        if positive.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return Err(Error::InvalidConfig("tolerances must be positive".into()));
        }
        if self.cg_max_iter == 0 || self.newton_max_iter == 0 {
            return Err(Error::InvalidConfig("iteration limits must be positive".into()));
        }
        Ok(())
    }
}

/// LU factorisation with partial pivoting, reusable across right-hand sides.
#[derive(Debug, Clone)]
pub struct LuFactor {
    lu: LU<f64, Dyn, Dyn>,
}

impl LuFactor {
    pub fn new(a: DMatrix<f64>) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::DimensionMismatch {
                expected: a.nrows(),
                found: a.ncols(),
            });
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        let lu = a.lu();
        if !lu.is_invertible() {
            return Err(Error::SingularMatrix);
        }
        Ok(Self { lu })
    }

    pub fn solve(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        let x = self.lu.solve(b).ok_or(Error::SingularMatrix)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularMatrix);
        }
        Ok(x)
    }
}

/// Work done by one conjugate-gradient solve.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CgStats {
    pub iterations: usize,
    /// Number of operator applications.
    pub applications: usize,
}

pub fn solve_linear(a: &DMatrix<f64>, b: &DVector<f64>, config: &SolverConfig) -> Result<DVector<f64>> {
    if a.nrows() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.nrows(),
            found: b.len(),
        });
    }
    match config.mode {
        SolveMode::Direct => LuFactor::new(a.clone())?.solve(b),
        SolveMode::MatrixFree => Ok(solve_linear_matfree(|v| Ok(a * v), b, config)?.0),
    }
}

/// Conjugate gradients on an operator given only by its action.
pub fn solve_linear_matfree(
    mut apply: impl FnMut(&DVector<f64>) -> Result<DVector<f64>>,
    b: &DVector<f64>,
    config: &SolverConfig,
) -> Result<(DVector<f64>, CgStats)> {
    config.validate()?;
    let mut stats = CgStats::default();
    let mut x = DVector::zeros(b.len());
    let b_norm = b.norm();
    if b_norm == 0.0 {
        return Ok((x, stats));
    }
    let target = config.cg_rtol * b_norm;
    let mut r = b.clone();
    let mut p = r.clone();
    let mut rr = r.dot(&r);
    while stats.iterations < config.cg_max_iter {
        let ap = apply(&p)?;
        stats.applications += 1;
        if ap.len() != b.len() {
            return Err(Error::DimensionMismatch {
                expected: b.len(),
                found: ap.len(),
            });
        }
        let pap = p.dot(&ap);
        if pap.is_nan() || pap <= 0.0 {
            return Err(Error::InvalidArgument(
                "operator is not positive definite".into(),
            ));
        }
        let alpha = rr / pap;
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &ap, 1.0);
        stats.iterations += 1;
        let rr_new = r.dot(&r);
        if !rr_new.is_finite() {
            return Err(Error::NonFinite);
        }
        if rr_new.sqrt() <= target {
            return Ok((x, stats));
        }
        p *= rr_new / rr;
        p += &r;
        rr = rr_new;
    }
    Err(Error::CgNotConverged {
        iterations: stats.iterations,
        residual: rr.sqrt() / b_norm,
    })
}

/// Conjugate gradients with Dirichlet values imposed symmetrically: the
/// constrained rows and columns are removed by lifting, which keeps the
/// reduced operator SPD. The solution equals the one obtained by row
/// replacement.
pub fn solve_constrained_matfree(
    mut apply: impl FnMut(&DVector<f64>) -> Result<DVector<f64>>,
    b: &DVector<f64>,
    fixed: &[(usize, f64)],
    config: &SolverConfig,
) -> Result<(DVector<f64>, CgStats)> {
    let mut lift = DVector::zeros(b.len());
    for &(n, g) in fixed {
        lift[n] = g;
    }
    let mut stats = CgStats::default();
    let mut rhs = b.clone();
    if fixed.iter().any(|&(_, g)| g != 0.0) {
        rhs -= apply(&lift)?;
        stats.applications += 1;
    }
    for &(n, _) in fixed {
        rhs[n] = 0.0;
    }
    let (mut x, inner) = solve_linear_matfree(
        |v| {
            let mut pv = v.clone();
            for &(n, _) in fixed {
                pv[n] = 0.0;
            }
            let mut out = apply(&pv)?;
            for &(n, _) in fixed {
                out[n] = v[n];
            }
            Ok(out)
        },
        &rhs,
        config,
    )?;
    stats.iterations = inner.iterations;
    stats.applications += inner.applications;
    for &(n, g) in fixed {
        x[n] = g;
    }
    Ok((x, stats))
}
