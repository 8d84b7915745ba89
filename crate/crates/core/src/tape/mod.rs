//! The annotation tape: one block-row of the global lower-triangular system
//! per solve, recorded while the forward model runs.
//!
//! Each equation solves for a new [`VariableId`]. A linear equation stores
//! its operator blocks, each attached to the column variable it multiplies,
//! and a right-hand side. A Newton equation stores the residual `F(u) = 0`
//! and is linearised at its converged solution.

mod derive;
mod dump;
mod ops;
mod replay;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::ops::Range;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fem::{Bindings, DirichletBC, FunctionValue, LuFactor, Mesh1D, SolverConfig};
use crate::id::VariableId;
use crate::symbolics::{extract_dependencies, CoeffId, FormExpr, Space};

pub use derive::{DerivedRow, RowOperator};
pub use derive::RowKind;
pub use dump::TAPE_FORMAT_VERSION;
pub use replay::{ReplayEntry, ReplayReport};

/// Read access to forward values, from the tape's store or from a
/// checkpointing executor's working set.
pub trait ValueSource {
    fn value(&self, id: &VariableId) -> Option<&FunctionValue>;
}

impl ValueSource for BTreeMap<VariableId, FunctionValue> {
    fn value(&self, id: &VariableId) -> Option<&FunctionValue> {
        self.get(id)
    }
}

impl ValueSource for HashMap<VariableId, FunctionValue> {
    fn value(&self, id: &VariableId) -> Option<&FunctionValue> {
        self.get(id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BlockOperator {
    /// A multiple of the identity of the column's function space.
    Identity(f64),
    Form(FormExpr),
}

/// One operator block `A_ij` of an equation row.
#[derive(Debug, Clone)]
pub struct BlockRecord {
    pub column: VariableId,
    pub operator: BlockOperator,
    /// Tape variables the operator itself depends on.
    pub dependencies: BTreeSet<VariableId>,
}

#[derive(Debug, Clone)]
pub enum Rhs {
    Zero,
    Form {
        form: FormExpr,
        dependencies: BTreeSet<VariableId>,
    },
    /// The coefficient vector of a parameter, copied verbatim.
    Parameter(String),
}

/// Starting point of a Newton solve.
#[derive(Debug, Clone)]
pub enum Guess {
    Variable(VariableId),
    Value(FunctionValue),
}

#[derive(Debug, Clone)]
pub enum EquationKind {
    Linear { blocks: Vec<BlockRecord>, rhs: Rhs },
    Newton { residual: FormExpr, guess: Guess },
}

#[derive(Debug, Clone)]
pub struct TapeEquation {
    pub target: VariableId,
    pub space: Space,
    pub kind: EquationKind,
    pub timestep: usize,
    /// Model time when the equation was annotated; boundary values are
    /// evaluated here.
    pub time: f64,
    /// Values of the named parameters the equation's forms use, captured
    /// at annotation.
    pub parameters: BTreeMap<String, FunctionValue>,
    pub bc: Option<DirichletBC>,
    pub newton_iterations: usize,
}

impl TapeEquation {
    pub fn is_newton(&self) -> bool {
        matches!(self.kind, EquationKind::Newton { .. })
    }

    fn forms(&self) -> Vec<&FormExpr> {
        match &self.kind {
            EquationKind::Linear { blocks, rhs } => {
                let mut out: Vec<&FormExpr> = blocks
                    .iter()
                    .filter_map(|b| match &b.operator {
                        BlockOperator::Form(f) => Some(f),
                        BlockOperator::Identity(_) => None,
                    })
                    .collect();
                if let Rhs::Form { form, .. } = rhs {
                    out.push(form);
                }
                out
            }
            EquationKind::Newton { residual, .. } => vec![residual],
        }
    }

    fn diagonal(&self) -> Option<&BlockRecord> {
        match &self.kind {
            EquationKind::Linear { blocks, .. } => blocks.iter().find(|b| b.column == self.target),
            EquationKind::Newton { .. } => None,
        }
    }

    /// Variables other than the target whose perturbation changes the
    /// residual of this equation.
    pub fn dependencies(&self) -> BTreeSet<VariableId> {
        let mut out = BTreeSet::new();
        match &self.kind {
            EquationKind::Linear { blocks, rhs } => {
                for b in blocks {
                    out.insert(b.column.clone());
                    out.extend(b.dependencies.iter().cloned());
                }
                if let Rhs::Form { dependencies, .. } = rhs {
                    out.extend(dependencies.iter().cloned());
                }
            }
            EquationKind::Newton { residual, .. } => out.extend(extract_dependencies(residual)),
        }
        out.remove(&self.target);
        out
    }

    /// Values needed to re-solve the equation.
    pub fn forward_needs(&self) -> BTreeSet<VariableId> {
        let mut out = self.dependencies();
        if let EquationKind::Newton {
            guess: Guess::Variable(g),
            ..
        } = &self.kind
        {
            out.insert(g.clone());
        }
        out
    }

    /// Values needed to linearise the equation: its dependencies, plus the
    /// target itself when the operator acting on it is state-dependent.
    pub fn linearisation_needs(&self) -> BTreeSet<VariableId> {
        let mut out = self.dependencies();
        let self_dependent = match &self.kind {
            EquationKind::Newton { .. } => true,
            EquationKind::Linear { .. } => self
                .diagonal()
                .is_some_and(|d| !d.dependencies.is_empty()),
        };
        if self_dependent {
            out.insert(self.target.clone());
        }
        out
    }
}

/// Solve and assembly counts, used for cost accounting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct TapeCounters {
    pub forward_linear_solves: usize,
    pub newton_iterations: usize,
    pub adjoint_solves: usize,
    pub adjoint_linear_solves: usize,
    pub tlm_solves: usize,
    pub operator_assemblies: usize,
    pub factorizations: usize,
    pub cg_applications: usize,
}

#[derive(Debug, Default)]
struct AtomicCounters {
    forward_linear_solves: AtomicUsize,
    newton_iterations: AtomicUsize,
    adjoint_solves: AtomicUsize,
    adjoint_linear_solves: AtomicUsize,
    tlm_solves: AtomicUsize,
    operator_assemblies: AtomicUsize,
    factorizations: AtomicUsize,
    cg_applications: AtomicUsize,
}

impl AtomicCounters {
    fn bump(counter: &AtomicUsize, by: usize) {
        counter.fetch_add(by, Ordering::Relaxed);
    }

    fn snapshot(&self) -> TapeCounters {
        let get = |c: &AtomicUsize| c.load(Ordering::Relaxed);
        TapeCounters {
            forward_linear_solves: get(&self.forward_linear_solves),
            newton_iterations: get(&self.newton_iterations),
            adjoint_solves: get(&self.adjoint_solves),
            adjoint_linear_solves: get(&self.adjoint_linear_solves),
            tlm_solves: get(&self.tlm_solves),
            operator_assemblies: get(&self.operator_assemblies),
            factorizations: get(&self.factorizations),
            cg_applications: get(&self.cg_applications),
        }
    }
}

/// Assembled matrix and factorisations of an operator that depends on no
/// tape variable, keyed by its rendering and parameter values.
#[derive(Default)]
struct CachedOperator {
    matrix: Option<Arc<DMatrix<f64>>>,
    lu: Option<Arc<LuFactor>>,
    lu_transposed: Option<Arc<LuFactor>>,
}

pub struct Tape {
    mesh: Mesh1D,
    config: SolverConfig,
    annotate: bool,
    equations: Vec<TapeEquation>,
    index: HashMap<VariableId, usize>,
    store: BTreeMap<VariableId, FunctionValue>,
    /// Every solve in order with its model time, annotated or not.
    history: Vec<(VariableId, f64)>,
    spaces: HashMap<VariableId, Space>,
    parameters: BTreeMap<String, FunctionValue>,
    boundaries: Vec<usize>,
    boundary_times: Vec<f64>,
    since_boundary: usize,
    timestep: usize,
    time: f64,
    versions: HashMap<(String, usize), usize>,
    cache: Mutex<HashMap<String, CachedOperator>>,
    counters: AtomicCounters,
}

impl std::fmt::Debug for Tape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tape")
            .field("equations", &self.equations.len())
            .field("timestep", &self.timestep)
            .field("annotate", &self.annotate)
            .finish_non_exhaustive()
    }
}

impl Tape {
    pub fn new(mesh: Mesh1D, config: SolverConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            mesh,
            config,
            annotate: true,
            equations: Vec::new(),
            index: HashMap::new(),
            store: BTreeMap::new(),
            history: Vec::new(),
            spaces: HashMap::new(),
            parameters: BTreeMap::new(),
            boundaries: Vec::new(),
            boundary_times: Vec::new(),
            since_boundary: 0,
            timestep: 0,
            time: 0.0,
            versions: HashMap::new(),
            cache: Mutex::new(HashMap::new()),
            counters: AtomicCounters::default(),
        })
    }

    /// A tape that performs the same solves but records no equations.
    pub fn unannotated(mesh: Mesh1D, config: SolverConfig) -> Result<Self> {
        let mut tape = Self::new(mesh, config)?;
        tape.annotate = false;
        Ok(tape)
    }

    pub fn is_annotating(&self) -> bool {
        self.annotate
    }

    pub fn mesh(&self) -> &Mesh1D {
        &self.mesh
    }

    pub fn config(&self) -> &SolverConfig {
        &self.config
    }

    pub fn equations(&self) -> &[TapeEquation] {
        &self.equations
    }

    pub fn equation_of(&self, id: &VariableId) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn counters(&self) -> TapeCounters {
        self.counters.snapshot()
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn set_time(&mut self, t: f64) {
        self.time = t;
    }

    pub fn timestep(&self) -> usize {
        self.timestep
    }

    /// Registers or updates a named parameter. Its value at the time of
    /// each annotation is what the derived models see.
    pub fn set_parameter(&mut self, name: impl Into<String>, value: FunctionValue) -> Result<()> {
        let name = name.into();
        if name.starts_with('#') {
            return Err(Error::InvalidArgument(format!(
                "parameter names starting with '#' are reserved: {name}"
            )));
        }
        self.parameters.insert(name, value);
        Ok(())
    }

    pub fn parameter(&self, name: &str) -> Option<&FunctionValue> {
        self.parameters.get(name)
    }

    pub fn value(&self, id: &VariableId) -> Option<&FunctionValue> {
        self.store.get(id)
    }

    pub fn values(&self) -> &BTreeMap<VariableId, FunctionValue> {
        &self.store
    }

    /// Overwrites a stored value without annotating anything, the way an
    /// unrecorded in-place update would. Replay detects this.
    pub fn overwrite_value(&mut self, id: &VariableId, value: FunctionValue) -> Result<()> {
        match self.store.get_mut(id) {
            Some(v) => {
                *v = value;
                Ok(())
            }
            None => Err(Error::UnknownVariable(id.clone())),
        }
    }

    pub fn space_of(&self, id: &VariableId) -> Option<Space> {
        self.spaces.get(id).copied()
    }

    /// Identifier the next solve into `name` will receive.
    pub fn next_id(&self, name: &str) -> VariableId {
        let iteration = self
            .versions
            .get(&(name.to_string(), self.timestep))
            .copied()
            .unwrap_or(0);
        VariableId::new(name, self.timestep, iteration)
    }

    /// Most recent version of `name`.
    pub fn latest(&self, name: &str) -> Option<VariableId> {
        self.store
            .keys()
            .filter(|id| id.name == name)
            .max_by_key(|id| (id.timestep, id.iteration))
            .cloned()
    }

    /// Marks the end of a timestep.
    pub fn increment_timestep(&mut self) -> Result<()> {
        if self.since_boundary == 0 {
            return Err(Error::EmptyTimestep);
        }
        self.boundaries.push(self.history.len());
        self.boundary_times.push(self.time);
        self.since_boundary = 0;
        self.timestep += 1;
        Ok(())
    }

    /// Solved variables in order, with the model time of each solve.
    pub fn history(&self) -> &[(VariableId, f64)] {
        &self.history
    }

    /// Solve counts at each timestep boundary; equal to equation counts on
    /// an annotating tape.
    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    /// Model time at each timestep boundary.
    pub fn boundary_times(&self) -> &[f64] {
        &self.boundary_times
    }

    /// Equation index ranges of the checkpointing units. Without any
    /// boundary the whole tape is a single unit.
    pub fn units(&self) -> Vec<Range<usize>> {
        let mut out = Vec::new();
        let mut start = 0;
        for &b in &self.boundaries {
            out.push(start..b);
            start = b;
        }
        if start < self.equations.len() || out.is_empty() {
            out.push(start..self.equations.len());
        }
        out
    }

    /// Unit index that contains equation `i`.
    pub fn unit_of(&self, i: usize) -> usize {
        self.boundaries.partition_point(|&b| b <= i)
    }

    fn check_dependency(&self, id: &VariableId) -> Result<()> {
        let known = if self.annotate {
            self.index.contains_key(id)
        } else {
            self.store.contains_key(id)
        };
        if known {
            Ok(())
        } else {
            Err(Error::DependencyNotFound(id.clone()))
        }
    }

    fn snapshot_parameters(
        &self,
        forms: &[&FormExpr],
        extra: &[&str],
        bindings: &Bindings,
    ) -> Result<BTreeMap<String, FunctionValue>> {
        let mut names: BTreeSet<String> = extra.iter().map(|s| s.to_string()).collect();
        for f in forms {
            for c in f.coefficients() {
                if let CoeffId::Param(name) = c.id {
                    names.insert(name);
                }
            }
        }
        let mut out = BTreeMap::new();
        for name in names {
            if name.starts_with('#') {
                return Err(Error::InvalidArgument(format!(
                    "reserved parameter name in annotated form: {name}"
                )));
            }
            let value = bindings
                .get(&CoeffId::Param(name.clone()))
                .or_else(|| self.parameters.get(&name))
                .ok_or_else(|| Error::UnboundCoefficient(name.clone()))?;
            out.insert(name, value.clone());
        }
        Ok(out)
    }

    /// Solves a linear variational problem `lhs(u, v) = rhs(v)` for a new
    /// version of `name`. Tape variables in `rhs` become right-hand-side
    /// dependencies.
    pub fn annotate_linear_solve(
        &mut self,
        lhs: &FormExpr,
        rhs: &FormExpr,
        name: &str,
        bc: Option<&DirichletBC>,
        bindings: &Bindings,
    ) -> Result<VariableId> {
        self.annotate_system_solve(lhs, &[], Some(rhs), name, bc, bindings)
    }

    /// Solves `diag u + Σ_j A_j u_j = rhs` for a new version of `name`,
    /// recording each `A_j` as the block in column `u_j`.
    pub fn annotate_system_solve(
        &mut self,
        diag: &FormExpr,
        off_diagonal: &[(FormExpr, VariableId)],
        rhs: Option<&FormExpr>,
        name: &str,
        bc: Option<&DirichletBC>,
        bindings: &Bindings,
    ) -> Result<VariableId> {
        let target = self.next_id(name);
        let sig = diag.signature()?;
        if sig.rank() != 2 {
            return Err(Error::RankMismatch {
                expected: 2,
                found: sig.rank(),
            });
        }
        let space = sig.trial.expect("rank-2 form has a trial function");
        let diag_deps = extract_dependencies(diag);
        if diag_deps.contains(&target) {
            return Err(Error::SelfDependentDiagonal(target));
        }
        let mut blocks = vec![BlockRecord {
            column: target.clone(),
            operator: BlockOperator::Form(diag.clone()),
            dependencies: diag_deps,
        }];
        for (form, column) in off_diagonal {
            if form.rank()? != 2 {
                return Err(Error::RankMismatch {
                    expected: 2,
                    found: form.rank()?,
                });
            }
            blocks.push(BlockRecord {
                column: column.clone(),
                operator: BlockOperator::Form(form.clone()),
                dependencies: extract_dependencies(form),
            });
        }
        let rhs = match rhs {
            Some(form) => {
                if form.rank()? != 1 {
                    return Err(Error::RankMismatch {
                        expected: 1,
                        found: form.rank()?,
                    });
                }
                Rhs::Form {
                    form: form.clone(),
                    dependencies: extract_dependencies(form),
                }
            }
            None => Rhs::Zero,
        };
        self.record(target, space, EquationKind::Linear { blocks, rhs }, bc, bindings, &[])
    }

    /// Solves `residual(u; v) = 0` by Newton's method and records the
    /// equivalent equation `I u = I u - F(u)`: the derived models use only
    /// the Jacobian at the converged solution. The unknown is referenced in
    /// `residual` as the coefficient `next_id(name)`.
    pub fn annotate_newton_solve(
        &mut self,
        residual: &FormExpr,
        name: &str,
        guess: Guess,
        bc: Option<&DirichletBC>,
        bindings: &Bindings,
    ) -> Result<VariableId> {
        let target = self.next_id(name);
        if residual.rank()? != 1 {
            return Err(Error::RankMismatch {
                expected: 1,
                found: residual.rank()?,
            });
        }
        let space = residual
            .coefficients()
            .into_iter()
            .find(|c| c.id == CoeffId::Var(target.clone()))
            .map(|c| c.space)
            .ok_or_else(|| {
                Error::InvalidArgument(format!("residual does not reference its unknown {target}"))
            })?;
        if let Guess::Variable(g) = &guess {
            self.check_dependency(g)?;
        }
        let kind = EquationKind::Newton {
            residual: residual.clone(),
            guess,
        };
        self.record(target, space, kind, bc, bindings, &[])
    }

    /// Copies the value of `src` into a new version of `name`.
    pub fn annotate_assign(&mut self, src: &VariableId, name: &str) -> Result<VariableId> {
        self.check_dependency(src)?;
        let target = self.next_id(name);
        let space = self
            .space_of(src)
            .ok_or_else(|| Error::UnknownVariable(src.clone()))?;
        let blocks = vec![
            BlockRecord {
                column: target.clone(),
                operator: BlockOperator::Identity(1.0),
                dependencies: BTreeSet::new(),
            },
            BlockRecord {
                column: src.clone(),
                operator: BlockOperator::Identity(-1.0),
                dependencies: BTreeSet::new(),
            },
        ];
        let kind = EquationKind::Linear {
            blocks,
            rhs: Rhs::Zero,
        };
        self.record(target, space, kind, None, &Bindings::new(), &[])
    }

    /// Copies the value of a named parameter into a new version of `name`;
    /// this is how an initial condition becomes a control.
    pub fn annotate_assign_parameter(
        &mut self,
        parameter: &str,
        name: &str,
        bindings: &Bindings,
    ) -> Result<VariableId> {
        let target = self.next_id(name);
        let value = bindings
            .get(&CoeffId::Param(parameter.to_string()))
            .or_else(|| self.parameters.get(parameter))
            .ok_or_else(|| Error::UnboundCoefficient(parameter.to_string()))?;
        let space = value.space;
        let blocks = vec![BlockRecord {
            column: target.clone(),
            operator: BlockOperator::Identity(1.0),
            dependencies: BTreeSet::new(),
        }];
        let kind = EquationKind::Linear {
            blocks,
            rhs: Rhs::Parameter(parameter.to_string()),
        };
        self.record(target, space, kind, None, bindings, &[parameter])
    }

    fn record(
        &mut self,
        target: VariableId,
        space: Space,
        kind: EquationKind,
        bc: Option<&DirichletBC>,
        bindings: &Bindings,
        extra_parameters: &[&str],
    ) -> Result<VariableId> {
        let mut eq = TapeEquation {
            target: target.clone(),
            space,
            kind,
            timestep: self.timestep,
            time: self.time,
            parameters: BTreeMap::new(),
            bc: bc.cloned(),
            newton_iterations: 0,
        };
        eq.parameters = self.snapshot_parameters(&eq.forms(), extra_parameters, bindings)?;
        for dep in eq.forward_needs() {
            self.check_dependency(&dep)?;
        }

        let bound = self.bind(&eq, &eq.forward_needs(), &self.store, Some(bindings))?;
        let (value, newton_iterations) = self.forward_solve(&eq, &bound)?;
        eq.newton_iterations = newton_iterations;

        *self
            .versions
            .entry((target.name.clone(), target.timestep))
            .or_insert(0) += 1;
        self.store.insert(target.clone(), value);
        self.spaces.insert(target.clone(), space);
        self.history.push((target.clone(), eq.time));
        if self.annotate {
            self.index.insert(target.clone(), self.equations.len());
            self.equations.push(eq);
        }
        self.since_boundary += 1;
        Ok(target)
    }
}
