//! Adjoint and tangent-linear rows derived from recorded equations.
//!
//! For equation `i` with target `u_i`, the linearisation with respect to an
//! earlier variable `u_k` is `A_ik + G_ik - R_ik`: the block in column `k`,
//! the derivative of the operators acting on their (frozen) columns, and the
//! derivative of the right-hand side. Newton equations contribute `dF/du_k`
//! directly.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::ops::col_param;
use super::{AtomicCounters, BlockOperator, EquationKind, Rhs, Tape, TapeEquation, ValueSource};
use crate::error::{Error, Result};
use crate::fem::{assemble_vector, Bindings, FunctionValue, LuFactor};
use crate::id::VariableId;
use crate::symbolics::{
    action, gateaux_derivative, transpose_form, CoefficientRef, Family, FormExpr, Space,
};

/// Left-hand side of a derived row.
#[derive(Debug, Clone)]
pub enum RowOperator {
    Identity,
    /// Assembled, with Dirichlet rows already replaced.
    Matrix(DMatrix<f64>),
    /// Factorisation reused from the operator cache.
    Factorized(Arc<LuFactor>),
    /// Applied by assembling the action of `form`; never materialised.
    MatrixFree { form: FormExpr, bindings: Bindings },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    Adjoint,
    TangentLinear,
}

/// One adjoint or tangent-linear equation, ready to solve.
#[derive(Debug, Clone)]
pub struct DerivedRow {
    pub variable: VariableId,
    pub space: Space,
    pub kind: RowKind,
    pub lhs: RowOperator,
    /// Right-hand side with homogeneous Dirichlet rows already zeroed.
    pub rhs: DVector<f64>,
    pub fixed: Vec<usize>,
}

const ADJOINT: &str = "#adjoint";
const TANGENT: &str = "#tlm";
const DIRECTION: &str = "#dir";

impl Tape {
    fn equation(&self, id: &VariableId) -> Result<(usize, &TapeEquation)> {
        let i = self
            .equation_of(id)
            .ok_or_else(|| Error::UnknownVariable(id.clone()))?;
        Ok((i, &self.equations[i]))
    }

    /// `dF_i/du_k` split into an identity multiple and a rank-2 form in
    /// which operator columns appear as `#col<b>` parameters.
    fn coupling(&self, eq: &TapeEquation, k: &VariableId) -> Result<(f64, Option<FormExpr>)> {
        let space = self
            .space_of(k)
            .ok_or_else(|| Error::UnknownVariable(k.clone()))?;
        let wrt = CoefficientRef::var(k.clone(), space);
        let trial = FormExpr::trial(space);
        let mut scale = 0.0;
        let mut terms = Vec::new();
        match &eq.kind {
            EquationKind::Linear { blocks, rhs } => {
                for (bi, block) in blocks.iter().enumerate() {
                    match &block.operator {
                        BlockOperator::Identity(s) => {
                            if block.column == *k {
                                scale += s;
                            }
                        }
                        BlockOperator::Form(a) => {
                            if block.column == *k {
                                terms.push(a.clone());
                            }
                            if block.dependencies.contains(k) {
                                let col_space = self
                                    .space_of(&block.column)
                                    .unwrap_or(eq.space);
                                let frozen = CoefficientRef::param(col_param(bi), col_space);
                                terms.push(gateaux_derivative(&action(a, &frozen)?, &wrt, &trial)?);
                            }
                        }
                    }
                }
                if let Rhs::Form { form, dependencies } = rhs {
                    if dependencies.contains(k) {
                        terms.push(-gateaux_derivative(form, &wrt, &trial)?);
                    }
                }
            }
            EquationKind::Newton { residual, .. } => {
                terms.push(gateaux_derivative(residual, &wrt, &trial)?);
            }
        }
        let form = if terms.is_empty() {
            None
        } else {
            Some(FormExpr::sum(terms))
        };
        Ok((scale, form))
    }

    /// `(dF_i/du_k)^T z`.
    fn coupling_transpose(
        &self,
        eq: &TapeEquation,
        k: &VariableId,
        z: &FunctionValue,
        b: &Bindings,
    ) -> Result<DVector<f64>> {
        let (scale, form) = self.coupling(eq, k)?;
        let n = crate::fem::space_dim(self.space_of(k).unwrap_or(eq.space), &self.mesh);
        let mut out = DVector::zeros(n);
        if scale != 0.0 {
            out.axpy(scale, &z.values, 1.0);
        }
        if let Some(form) = form {
            let probe = CoefficientRef::param(ADJOINT, eq.space);
            let mut bound = b.clone();
            bound.insert(probe.id.clone(), z.clone());
            out += assemble_vector(&action(&transpose_form(&form)?, &probe)?, &self.mesh, &bound)?;
        }
        Ok(out)
    }

    /// `(dF_i/du_k) d`.
    fn coupling_action(
        &self,
        eq: &TapeEquation,
        k: &VariableId,
        d: &FunctionValue,
        b: &Bindings,
    ) -> Result<DVector<f64>> {
        let (scale, form) = self.coupling(eq, k)?;
        let mut out = DVector::zeros(crate::fem::space_dim(eq.space, &self.mesh));
        if scale != 0.0 {
            out.axpy(scale, &d.values, 1.0);
        }
        if let Some(form) = form {
            let probe = CoefficientRef::param(TANGENT, d.space);
            let mut bound = b.clone();
            bound.insert(probe.id.clone(), d.clone());
            out += assemble_vector(&action(&form, &probe)?, &self.mesh, &bound)?;
        }
        Ok(out)
    }

    fn lhs_operator(
        &self,
        eq: &TapeEquation,
        b: &Bindings,
        transposed: bool,
    ) -> Result<RowOperator> {
        match &eq.kind {
            EquationKind::Linear { .. } => {
                match &eq.diagonal().expect("linear equation has a diagonal block").operator {
                    BlockOperator::Identity(_) => Ok(RowOperator::Identity),
                    BlockOperator::Form(a) => self.operator(eq, a, b, transposed),
                }
            }
            EquationKind::Newton { residual, .. } => {
                let jac = self.jacobian(eq, residual)?;
                self.operator(eq, &jac, b, transposed)
            }
        }
    }

    fn identity_scale(eq: &TapeEquation) -> f64 {
        match eq.diagonal().map(|d| &d.operator) {
            Some(BlockOperator::Identity(s)) => *s,
            _ => 1.0,
        }
    }

    /// Bindings for linearising equation `i` at the values in `values`.
    pub(crate) fn linearisation_bindings(
        &self,
        i: usize,
        values: &dyn ValueSource,
    ) -> Result<Bindings> {
        let eq = &self.equations[i];
        let mut needs = eq.linearisation_needs();
        needs.insert(eq.target.clone());
        self.bind(eq, &needs, values, None)
    }

    /// Adjoint row of variable `k`, gathering `(dF_i/du_k)^T z_i` from every
    /// later equation `i` that depends on `k`. Forward values come from the
    /// tape's store.
    pub fn derive_adjoint_row(
        &self,
        k: &VariableId,
        adjoints: &BTreeMap<VariableId, FunctionValue>,
        dj_du: &DVector<f64>,
    ) -> Result<DerivedRow> {
        let (ki, eq) = self.equation(k)?;
        let mut rhs = dj_du.clone();
        for (i, later) in self.equations.iter().enumerate().skip(ki + 1) {
            if !later.dependencies().contains(k) {
                continue;
            }
            let z = adjoints
                .get(&later.target)
                .ok_or_else(|| Error::MissingAdjointValue(later.target.clone()))?;
            let b = self.linearisation_bindings(i, &self.store)?;
            rhs -= self.coupling_transpose(later, k, z, &b)?;
        }
        let b = self.linearisation_bindings(ki, &self.store)?;
        self.finish_row(eq, &b, rhs, RowKind::Adjoint)
    }

    /// Tangent-linear row of variable `k`: `dF_k/du_k du_k = -dF_k/dm d
    /// - Σ_j dF_k/du_j du_j` over the earlier variables `j`.
    pub fn derive_tlm_row(
        &self,
        k: &VariableId,
        tlm: &BTreeMap<VariableId, FunctionValue>,
        df_dm: &DVector<f64>,
    ) -> Result<DerivedRow> {
        let (ki, _) = self.equation(k)?;
        self.tlm_row_with(ki, tlm, df_dm, &self.store)
    }

    pub(crate) fn tlm_row_with(
        &self,
        ki: usize,
        tlm: &BTreeMap<VariableId, FunctionValue>,
        df_dm: &DVector<f64>,
        values: &dyn ValueSource,
    ) -> Result<DerivedRow> {
        let eq = &self.equations[ki];
        let b = self.linearisation_bindings(ki, values)?;
        let mut rhs = -df_dm;
        for j in eq.dependencies() {
            let d = tlm
                .get(&j)
                .ok_or_else(|| Error::MissingTangentValue(j.clone()))?;
            rhs -= self.coupling_action(eq, &j, d, &b)?;
        }
        self.finish_row(eq, &b, rhs, RowKind::TangentLinear)
    }

    fn finish_row(
        &self,
        eq: &TapeEquation,
        b: &Bindings,
        mut rhs: DVector<f64>,
        kind: RowKind,
    ) -> Result<DerivedRow> {
        let expected = crate::fem::space_dim(eq.space, &self.mesh);
        if rhs.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                found: rhs.len(),
            });
        }
        let lhs = self.lhs_operator(eq, b, kind == RowKind::Adjoint)?;
        if let RowOperator::Identity = lhs {
            rhs /= Self::identity_scale(eq);
        }
        let fixed = self.fixed_nodes(eq);
        for &n in &fixed {
            rhs[n] = 0.0;
        }
        Ok(DerivedRow {
            variable: eq.target.clone(),
            space: eq.space,
            kind,
            lhs,
            rhs,
            fixed,
        })
    }

    /// Solves a derived row and updates the solve counters.
    pub fn solve_row(&self, row: &DerivedRow) -> Result<FunctionValue> {
        let fixed: Vec<(usize, f64)> = row.fixed.iter().map(|&n| (n, 0.0)).collect();
        let x = self.solve_operator(&row.lhs, row.rhs.clone(), &fixed)?;
        match row.kind {
            RowKind::Adjoint => {
                AtomicCounters::bump(&self.counters.adjoint_solves, 1);
                if !matches!(row.lhs, RowOperator::Identity) {
                    AtomicCounters::bump(&self.counters.adjoint_linear_solves, 1);
                }
            }
            RowKind::TangentLinear => AtomicCounters::bump(&self.counters.tlm_solves, 1),
        }
        Ok(FunctionValue {
            space: row.space,
            values: x,
        })
    }

    /// Solves the adjoint of equation `i` and pushes `(dF_i/du_k)^T z_i`
    /// into `pending` for each of its dependencies `k`. `pending` must
    /// already hold the contributions of all later equations to `u_i`.
    pub fn adjoint_step(
        &self,
        i: usize,
        dj_du: DVector<f64>,
        pending: &mut BTreeMap<VariableId, DVector<f64>>,
        values: &dyn ValueSource,
    ) -> Result<FunctionValue> {
        let eq = &self.equations[i];
        let mut rhs = dj_du;
        if let Some(p) = pending.remove(&eq.target) {
            rhs -= p;
        }
        let b = self.linearisation_bindings(i, values)?;
        let row = self.finish_row(eq, &b, rhs, RowKind::Adjoint)?;
        let z = self.solve_row(&row)?;
        for k in eq.dependencies() {
            let c = self.coupling_transpose(eq, &k, &z, &b)?;
            match pending.get_mut(&k) {
                Some(acc) => *acc += c,
                None => {
                    pending.insert(k, c);
                }
            }
        }
        Ok(z)
    }

    /// Residual of a linear equation as a single rank-1 form, with block
    /// columns frozen as `#col<b>`. Identity blocks and parameter
    /// right-hand sides are not included.
    fn residual_form(&self, eq: &TapeEquation) -> Result<Option<FormExpr>> {
        match &eq.kind {
            EquationKind::Newton { residual, .. } => Ok(Some(residual.clone())),
            EquationKind::Linear { blocks, rhs } => {
                let mut terms = Vec::new();
                for (bi, block) in blocks.iter().enumerate() {
                    if let BlockOperator::Form(a) = &block.operator {
                        let space = self.space_of(&block.column).unwrap_or(eq.space);
                        terms.push(action(a, &CoefficientRef::param(col_param(bi), space))?);
                    }
                }
                if let Rhs::Form { form, .. } = rhs {
                    terms.push(-form.clone());
                }
                Ok((!terms.is_empty()).then(|| FormExpr::sum(terms)))
            }
        }
    }

    fn parameter_space(eq: &TapeEquation, name: &str) -> Option<Space> {
        eq.parameters.get(name).map(|v| v.space)
    }

    /// `(dF_i/dp)^T z_i` for the named parameter `p`, or `None` when
    /// equation `i` does not use it.
    pub(crate) fn parameter_adjoint_term(
        &self,
        i: usize,
        name: &str,
        z: &FunctionValue,
        values: &dyn ValueSource,
    ) -> Result<Option<DVector<f64>>> {
        let eq = &self.equations[i];
        let Some(space) = Self::parameter_space(eq, name) else {
            return Ok(None);
        };
        let mut out = DVector::zeros(crate::fem::space_dim(space, &self.mesh));
        if let EquationKind::Linear {
            rhs: Rhs::Parameter(p),
            ..
        } = &eq.kind
        {
            if p == name {
                out -= &z.values;
            }
        }
        if let Some(form) = self.residual_form(eq)? {
            let p = CoefficientRef::param(name, space);
            if form.coefficients().contains(&p) {
                let b = self.linearisation_bindings(i, values)?;
                let mut bound = b;
                let probe = CoefficientRef::param(ADJOINT, eq.space);
                bound.insert(probe.id.clone(), z.clone());
                match space.family {
                    Family::Lagrange => {
                        let d = gateaux_derivative(&form, &p, &FormExpr::trial(space))?;
                        let t = action(&transpose_form(&d)?, &probe)?;
                        out += assemble_vector(&t, &self.mesh, &bound)?;
                    }
                    Family::Real => {
                        let d = gateaux_derivative(&form, &p, &FormExpr::constant(1.0))?;
                        let col = assemble_vector(&d, &self.mesh, &bound)?;
                        out[0] += col.dot(&z.values);
                    }
                }
            }
        }
        Ok(Some(out))
    }

    /// `(dF_i/dp) d` for the named parameter `p` in direction `d`, or
    /// `None` when equation `i` does not use it.
    pub(crate) fn parameter_tlm_term(
        &self,
        i: usize,
        name: &str,
        direction: &FunctionValue,
        values: &dyn ValueSource,
    ) -> Result<Option<DVector<f64>>> {
        let eq = &self.equations[i];
        let Some(space) = Self::parameter_space(eq, name) else {
            return Ok(None);
        };
        if direction.space != space {
            return Err(Error::SpaceMismatch {
                expected: space.to_string(),
                found: direction.space.to_string(),
            });
        }
        let mut out = DVector::zeros(crate::fem::space_dim(eq.space, &self.mesh));
        if let EquationKind::Linear {
            rhs: Rhs::Parameter(p),
            ..
        } = &eq.kind
        {
            if p == name {
                out -= &direction.values;
            }
        }
        if let Some(form) = self.residual_form(eq)? {
            let p = CoefficientRef::param(name, space);
            if form.coefficients().contains(&p) {
                let mut bound = self.linearisation_bindings(i, values)?;
                match space.family {
                    Family::Lagrange => {
                        let probe = CoefficientRef::param(DIRECTION, space);
                        bound.insert(probe.id.clone(), direction.clone());
                        let d = gateaux_derivative(&form, &p, &probe.expr())?;
                        out += assemble_vector(&d, &self.mesh, &bound)?;
                    }
                    Family::Real => {
                        let d = gateaux_derivative(&form, &p, &FormExpr::constant(1.0))?;
                        out.axpy(direction.values[0], &assemble_vector(&d, &self.mesh, &bound)?, 1.0);
                    }
                }
            }
        }
        Ok(Some(out))
    }

    /// Whether any equation uses the named parameter.
    pub fn uses_parameter(&self, name: &str) -> bool {
        self.equations
            .iter()
            .any(|eq| eq.parameters.contains_key(name))
    }
}
