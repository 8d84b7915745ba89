//! Forward solves and operator construction shared by annotation, replay
//! and the derived models.

use std::collections::BTreeSet;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::{
    AtomicCounters, BlockOperator, CachedOperator, EquationKind, Guess, Rhs, RowOperator, Tape,
    TapeEquation, ValueSource,
};
use crate::error::{Error, Result};
use crate::fem::{
    assemble_matrix, assemble_vector, solve_constrained_matfree, solve_newton, space_dim, Bindings,
    FunctionValue, LuFactor, SolveMode,
};
use crate::id::VariableId;
use crate::symbolics::{action, gateaux_derivative, transpose_form, CoeffId, CoefficientRef, FormExpr};

pub(super) fn col_param(block: usize) -> String {
    format!("#col{block}")
}

fn replace_rows(m: &mut DMatrix<f64>, nodes: &[usize]) {
    for &n in nodes {
        m.row_mut(n).fill(0.0);
        m[(n, n)] = 1.0;
    }
}

impl Tape {
    /// Bindings for the forms of `eq`: its parameter snapshot, the listed
    /// tape variables, and each form block's column value under `#col<b>`.
    pub(super) fn bind(
        &self,
        eq: &TapeEquation,
        needs: &BTreeSet<VariableId>,
        values: &dyn ValueSource,
        overrides: Option<&Bindings>,
    ) -> Result<Bindings> {
        let mut b = Bindings::new();
        for (name, v) in &eq.parameters {
            b.insert(CoeffId::Param(name.clone()), v.clone());
        }
        for id in needs {
            let key = CoeffId::Var(id.clone());
            let v = overrides
                .and_then(|o| o.get(&key))
                .or_else(|| values.value(id))
                .ok_or_else(|| Error::MissingForwardValue(id.clone()))?;
            b.insert(key, v.clone());
        }
        if let EquationKind::Linear { blocks, .. } = &eq.kind {
            for (bi, block) in blocks.iter().enumerate() {
                if let BlockOperator::Form(_) = block.operator {
                    if let Some(v) = b.get(&CoeffId::Var(block.column.clone())) {
                        let v = v.clone();
                        b.insert(CoeffId::Param(col_param(bi)), v);
                    }
                }
            }
        }
        Ok(b)
    }

    pub(super) fn var_ref(&self, id: &VariableId, b: &Bindings) -> Result<CoefficientRef> {
        let space = self
            .space_of(id)
            .or_else(|| b.get(&CoeffId::Var(id.clone())).map(|v| v.space))
            .ok_or_else(|| Error::UnknownVariable(id.clone()))?;
        Ok(CoefficientRef::var(id.clone(), space))
    }

    pub(super) fn fixed_values(&self, eq: &TapeEquation) -> Vec<(usize, f64)> {
        eq.bc
            .as_ref()
            .map(|bc| bc.values(&self.mesh, eq.time))
            .unwrap_or_default()
    }

    pub(super) fn fixed_nodes(&self, eq: &TapeEquation) -> Vec<usize> {
        eq.bc.as_ref().map(|bc| bc.nodes().to_vec()).unwrap_or_default()
    }

    /// Solves equation `eq` with every coefficient bound in `b`. Returns the
    /// solution and the Newton iteration count (0 for linear equations).
    pub(super) fn forward_solve(
        &self,
        eq: &TapeEquation,
        b: &Bindings,
    ) -> Result<(FunctionValue, usize)> {
        match &eq.kind {
            EquationKind::Linear { blocks, rhs } => {
                let n = space_dim(eq.space, &self.mesh);
                let mut r = match rhs {
                    Rhs::Zero => DVector::zeros(n),
                    Rhs::Form { form, .. } => assemble_vector(form, &self.mesh, b)?,
                    Rhs::Parameter(p) => b
                        .get(&CoeffId::Param(p.clone()))
                        .ok_or_else(|| Error::UnboundCoefficient(p.clone()))?
                        .values
                        .clone(),
                };
                if r.len() != n {
                    return Err(Error::DimensionMismatch {
                        expected: n,
                        found: r.len(),
                    });
                }
                for block in blocks.iter().filter(|blk| blk.column != eq.target) {
                    let column = b
                        .get(&CoeffId::Var(block.column.clone()))
                        .ok_or_else(|| Error::MissingForwardValue(block.column.clone()))?;
                    match &block.operator {
                        BlockOperator::Identity(s) => r.axpy(-s, &column.values, 1.0),
                        BlockOperator::Form(a) => {
                            let col = self.var_ref(&block.column, b)?;
                            r -= assemble_vector(&action(a, &col)?, &self.mesh, b)?;
                        }
                    }
                }
                let diag = eq.diagonal().expect("linear equation has a diagonal block");
                let op = match &diag.operator {
                    BlockOperator::Identity(s) => {
                        r /= *s;
                        RowOperator::Identity
                    }
                    BlockOperator::Form(a) => {
                        AtomicCounters::bump(&self.counters.forward_linear_solves, 1);
                        self.operator(eq, a, b, false)?
                    }
                };
                let x = self.solve_operator(&op, r, &self.fixed_values(eq))?;
                Ok((FunctionValue { space: eq.space, values: x }, 0))
            }
            EquationKind::Newton { residual, guess } => {
                let init = match guess {
                    Guess::Variable(g) => b
                        .get(&CoeffId::Var(g.clone()))
                        .ok_or_else(|| Error::MissingForwardValue(g.clone()))?
                        .clone(),
                    Guess::Value(v) => v.clone(),
                };
                let unknown = CoefficientRef::var(eq.target.clone(), eq.space);
                let report = solve_newton(
                    residual,
                    &unknown,
                    init,
                    eq.bc.as_ref(),
                    eq.time,
                    &self.mesh,
                    b,
                    &self.config,
                )?;
                AtomicCounters::bump(&self.counters.newton_iterations, report.iterations);
                Ok((report.value, report.iterations))
            }
        }
    }

    /// The Jacobian form of a Newton equation.
    pub(super) fn jacobian(&self, eq: &TapeEquation, residual: &FormExpr) -> Result<FormExpr> {
        let unknown = CoefficientRef::var(eq.target.clone(), eq.space);
        gateaux_derivative(residual, &unknown, &FormExpr::trial(eq.space))
    }

    /// Operator of a rank-2 form with the equation's Dirichlet rows
    /// replaced by identity rows, optionally transposed first.
    pub(super) fn operator(
        &self,
        eq: &TapeEquation,
        a: &FormExpr,
        b: &Bindings,
        transposed: bool,
    ) -> Result<RowOperator> {
        match self.config.mode {
            SolveMode::MatrixFree => Ok(RowOperator::MatrixFree {
                form: if transposed { transpose_form(a)? } else { a.clone() },
                bindings: b.clone(),
            }),
            SolveMode::Direct => {
                if crate::symbolics::extract_dependencies(a).is_empty() {
                    return Ok(RowOperator::Factorized(self.cached_lu(eq, a, b, transposed)?));
                }
                let m = assemble_matrix(a, &self.mesh, b)?;
                AtomicCounters::bump(&self.counters.operator_assemblies, 1);
                let mut m = if transposed { m.transpose() } else { m };
                replace_rows(&mut m, &self.fixed_nodes(eq));
                Ok(RowOperator::Matrix(m))
            }
        }
    }

    fn cached_lu(
        &self,
        eq: &TapeEquation,
        a: &FormExpr,
        b: &Bindings,
        transposed: bool,
    ) -> Result<Arc<LuFactor>> {
        let mut key = a.render();
        for c in a.coefficients() {
            if let Some(v) = b.get(&c.id) {
                key.push('|');
                for x in v.values.iter() {
                    key.push_str(&format!("{:x},", x.to_bits()));
                }
            }
        }
        key.push_str(&format!("|{:?}", self.fixed_nodes(eq)));

        let mut cache = self.cache.lock().expect("operator cache poisoned");
        let entry: &mut CachedOperator = cache.entry(key).or_default();
        let matrix = match &entry.matrix {
            Some(m) => m.clone(),
            None => {
                let m = Arc::new(assemble_matrix(a, &self.mesh, b)?);
                AtomicCounters::bump(&self.counters.operator_assemblies, 1);
                entry.matrix = Some(m.clone());
                m
            }
        };
        let slot = if transposed {
            &mut entry.lu_transposed
        } else {
            &mut entry.lu
        };
        if let Some(lu) = slot {
            return Ok(lu.clone());
        }
        let mut m = if transposed {
            matrix.transpose()
        } else {
            (*matrix).clone()
        };
        replace_rows(&mut m, &self.fixed_nodes(eq));
        let lu = Arc::new(LuFactor::new(m)?);
        AtomicCounters::bump(&self.counters.factorizations, 1);
        *slot = Some(lu.clone());
        Ok(lu)
    }

    /// Solves `op x = rhs` where the rows listed in `fixed` are identity
    /// rows with the given values.
    pub(super) fn solve_operator(
        &self,
        op: &RowOperator,
        mut rhs: DVector<f64>,
        fixed: &[(usize, f64)],
    ) -> Result<DVector<f64>> {
        for &(n, g) in fixed {
            rhs[n] = g;
        }
        let mut x = match op {
            RowOperator::Identity => rhs,
            RowOperator::Matrix(m) => {
                AtomicCounters::bump(&self.counters.factorizations, 1);
                LuFactor::new(m.clone())?.solve(&rhs)?
            }
            RowOperator::Factorized(lu) => lu.solve(&rhs)?,
            RowOperator::MatrixFree { form, bindings } => {
                let space = form
                    .signature()?
                    .trial
                    .expect("rank-2 form has a trial function");
                let probe = CoefficientRef::param("#v", space);
                let applied = action(form, &probe)?;
                let mut bound = bindings.clone();
                let (x, stats) = solve_constrained_matfree(
                    |v| {
                        bound.insert(
                            probe.id.clone(),
                            FunctionValue {
                                space,
                                values: v.clone(),
                            },
                        );
                        assemble_vector(&applied, &self.mesh, &bound)
                    },
                    &rhs,
                    fixed,
                    &self.config,
                )?;
                AtomicCounters::bump(&self.counters.cg_applications, stats.applications);
                x
            }
        };
        for &(n, g) in fixed {
            x[n] = g;
        }
        Ok(x)
    }
}
