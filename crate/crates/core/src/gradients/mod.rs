//! Functionals of the trajectory and their derivatives through the tape:
//! adjoint sweeps, tangent-linear sweeps, gradients and Taylor tests.

mod functional;
mod taylor;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::Range;

use nalgebra::DVector;
use serde::Serialize;

pub use functional::{evaluate_functional, functional_partial, Attribution, Functional, Sample, TimeMeasure};
pub use taylor::{random_direction, taylor_test, TaylorMode, TaylorReport};

use crate::checkpoint::{execute_with_checkpoints, AdjointDriver, CheckpointCounters, CheckpointPolicy};
use crate::error::{Error, Result};
use crate::fem::{assemble_matrix, space_dim, FunctionValue, LuFactor, Mesh1D};
use crate::id::VariableId;
use crate::symbolics::{Family, FormExpr, Space};
use crate::tape::{EquationKind, Rhs, Tape, ValueSource};

/// What a gradient is taken with respect to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ControlParameter {
    /// The initial value of the named variable, which must be set on the
    /// tape from a parameter by `annotate_assign_parameter`.
    InitialCondition(String),
    /// A named parameter used by the tape's forms or the functional.
    Parameter(String),
}

impl fmt::Display for ControlParameter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ControlParameter::InitialCondition(v) => write!(f, "initial condition of {v}"),
            ControlParameter::Parameter(p) => write!(f, "parameter {p}"),
        }
    }
}

impl ControlParameter {
    /// Name of the tape parameter holding the control.
    pub fn parameter_name(&self, tape: &Tape) -> Result<String> {
        match self {
            ControlParameter::InitialCondition(var) => {
                let eq = tape
                    .equations()
                    .iter()
                    .find(|eq| eq.target.name == *var)
                    .ok_or_else(|| Error::ControlNotOnTape(self.to_string()))?;
                match &eq.kind {
                    EquationKind::Linear {
                        rhs: Rhs::Parameter(p),
                        ..
                    } => Ok(p.clone()),
                    _ => Err(Error::ControlNotOnTape(format!(
                        "{self}: first equation for {var} is not an assignment from a parameter"
                    ))),
                }
            }
            ControlParameter::Parameter(p) => {
                if tape.uses_parameter(p) {
                    Ok(p.clone())
                } else {
                    Err(Error::ControlNotOnTape(self.to_string()))
                }
            }
        }
    }

    /// Current value of the control.
    pub fn value(&self, tape: &Tape) -> Result<FunctionValue> {
        let name = self.parameter_name(tape)?;
        tape.parameter(&name)
            .cloned()
            .ok_or_else(|| Error::ControlNotOnTape(self.to_string()))
    }
}

/// Euclidean norm of an adjoint value, with the time of its equation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdjointNorm {
    pub variable: VariableId,
    pub time: f64,
    pub norm: f64,
}

#[derive(Debug, Clone)]
pub struct AdjointSolution {
    /// Adjoint values, last equation first.
    pub adjoints: Vec<(VariableId, FunctionValue)>,
    pub norms: Vec<AdjointNorm>,
    pub checkpoint: CheckpointCounters,
}

#[derive(Debug, Clone)]
pub struct Gradient {
    /// Tape parameter the gradient is taken with respect to.
    pub parameter: String,
    /// `dJ/dm` in the Euclidean pairing: `value · d` is the directional
    /// derivative in direction `d`.
    pub value: FunctionValue,
    pub norms: Vec<AdjointNorm>,
    pub checkpoint: CheckpointCounters,
}

impl Gradient {
    pub fn euclidean_norm(&self) -> f64 {
        self.value.values.norm()
    }

    /// L2 norm of the function whose mass-matrix product is the gradient.
    /// For a Real-space control this is the absolute value.
    pub fn mass_weighted_norm(&self, mesh: &Mesh1D) -> Result<f64> {
        match self.value.space.family {
            Family::Real => Ok(self.value.values[0].abs()),
            Family::Lagrange => {
                let mass = mass_matrix(self.value.space, mesh)?;
                let riesz = LuFactor::new(mass)?.solve(&self.value.values)?;
                Ok(riesz.dot(&self.value.values).max(0.0).sqrt())
            }
        }
    }
}

pub(crate) fn mass_matrix(space: Space, mesh: &Mesh1D) -> Result<nalgebra::DMatrix<f64>> {
    let m = (FormExpr::trial(space) * FormExpr::test(space)).integrate();
    assemble_matrix(&m, mesh, &Default::default())
}

struct Sweep<'a> {
    attribution: &'a Attribution,
    control: Option<(String, Space)>,
    pending: BTreeMap<VariableId, DVector<f64>>,
    gradient: Option<DVector<f64>>,
    keep: bool,
    adjoints: Vec<(VariableId, FunctionValue)>,
    norms: Vec<AdjointNorm>,
}

impl AdjointDriver for Sweep<'_> {
    fn extra_needs(&self, tape: &Tape, unit: usize) -> BTreeSet<VariableId> {
        let range = tape.units()[unit].clone();
        tape.equations()[range]
            .iter()
            .flat_map(|eq| self.attribution.needs(&eq.target))
            .collect()
    }

    fn adjoint_unit(
        &mut self,
        tape: &Tape,
        _unit: usize,
        range: Range<usize>,
        values: &dyn ValueSource,
    ) -> Result<()> {
        for i in range.rev() {
            let eq = &tape.equations()[i];
            let dj = self.attribution.partial(tape, &eq.target, values)?;
            let z = tape.adjoint_step(i, dj, &mut self.pending, values)?;
            if let (Some((name, _)), Some(g)) = (&self.control, &mut self.gradient) {
                if let Some(term) = tape.parameter_adjoint_term(i, name, &z, values)? {
                    *g -= term;
                }
            }
            self.norms.push(AdjointNorm {
                variable: eq.target.clone(),
                time: eq.time,
                norm: z.values.norm(),
            });
            if self.keep {
                self.adjoints.push((eq.target.clone(), z));
            }
        }
        Ok(())
    }
}

fn sweep<'a>(
    attribution: &'a Attribution,
    tape: &Tape,
    policy: &CheckpointPolicy,
    control: Option<(String, Space)>,
    keep: bool,
) -> Result<(Sweep<'a>, CheckpointCounters)> {
    // The functional's direct dependence on the control reads the tape's
    // stored values; it is identical under every policy.
    let gradient = match &control {
        Some((name, space)) => Some(attribution.parameter_partial(tape, name, *space, tape.values())?),
        None => None,
    };
    let mut s = Sweep {
        attribution,
        control,
        pending: BTreeMap::new(),
        gradient,
        keep,
        adjoints: Vec::new(),
        norms: Vec::new(),
    };
    let counters = execute_with_checkpoints(tape, policy, &mut s)?;
    if let Some(k) = s.pending.keys().next() {
        return Err(Error::MissingAdjointValue(k.clone()));
    }
    Ok((s, counters))
}

/// Adjoint values of every tape equation for the functional `j`, computed
/// last equation first under the checkpointing `policy`.
pub fn compute_adjoint(j: &Functional, tape: &Tape, policy: &CheckpointPolicy) -> Result<AdjointSolution> {
    let attribution = j.attribution(tape)?;
    let (s, checkpoint) = sweep(&attribution, tape, policy, None, true)?;
    Ok(AdjointSolution {
        adjoints: s.adjoints,
        norms: s.norms,
        checkpoint,
    })
}

fn control_space(m: &ControlParameter, tape: &Tape) -> Result<(String, Space)> {
    let name = m.parameter_name(tape)?;
    let space = tape
        .parameter(&name)
        .map(|v| v.space)
        .ok_or_else(|| Error::ControlNotOnTape(m.to_string()))?;
    Ok((name, space))
}

/// `dJ/dm = ∂J/∂m - Σ_i (∂F_i/∂m)^T z_i` from one adjoint sweep.
pub fn compute_gradient(
    j: &Functional,
    m: &ControlParameter,
    tape: &Tape,
    policy: &CheckpointPolicy,
) -> Result<Gradient> {
    let control = control_space(m, tape)?;
    let attribution = j.attribution(tape)?;
    let (s, checkpoint) = sweep(&attribution, tape, policy, Some(control.clone()), false)?;
    Ok(Gradient {
        parameter: control.0,
        value: FunctionValue {
            space: control.1,
            values: s.gradient.expect("control sweep accumulates a gradient"),
        },
        norms: s.norms,
        checkpoint,
    })
}

/// Tangent-linear values `du/dm · direction` of every tape equation, in
/// record order.
pub fn compute_tlm(
    m: &ControlParameter,
    direction: &FunctionValue,
    tape: &Tape,
) -> Result<Vec<(VariableId, FunctionValue)>> {
    let (name, space) = control_space(m, tape)?;
    if direction.space != space || direction.len() != space_dim(space, tape.mesh()) {
        return Err(Error::SpaceMismatch {
            expected: space.to_string(),
            found: direction.space.to_string(),
        });
    }
    let mut tlm = BTreeMap::new();
    let mut out = Vec::with_capacity(tape.equations().len());
    for (i, eq) in tape.equations().iter().enumerate() {
        let df_dm = tape
            .parameter_tlm_term(i, &name, direction, tape.values())?
            .unwrap_or_else(|| DVector::zeros(space_dim(eq.space, tape.mesh())));
        let row = tape.tlm_row_with(i, &tlm, &df_dm, tape.values())?;
        let value = tape.solve_row(&row)?;
        tlm.insert(eq.target.clone(), value.clone());
        out.push((eq.target.clone(), value));
    }
    Ok(out)
}

/// Directional derivative of `j` along `direction` from the tangent-linear
/// model.
pub fn tlm_derivative(
    j: &Functional,
    m: &ControlParameter,
    direction: &FunctionValue,
    tape: &Tape,
) -> Result<f64> {
    let (name, space) = control_space(m, tape)?;
    let attribution = j.attribution(tape)?;
    let mut total = attribution
        .parameter_partial(tape, &name, space, tape.values())?
        .dot(&direction.values);
    for (id, du) in compute_tlm(m, direction, tape)? {
        if attribution.references(&id) {
            total += attribution.partial(tape, &id, tape.values())?.dot(&du.values);
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests;
