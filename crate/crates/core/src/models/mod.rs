//! Reference time-dependent models built on the tape: explicit and
//! implicit viscous Burgers, the heat equation and an Allen–Cahn type
//! reaction–diffusion equation, all on the unit interval with P1 elements.

mod schemes;

use std::f64::consts::PI;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{plan_offline, CheckpointCounters, CheckpointPolicy};
use crate::error::{Error, Result};
use crate::fem::{FunctionValue, Mesh1D, SolveMode, SolverConfig};
use crate::gradients::{
    compute_gradient, evaluate_functional, random_direction, taylor_test, ControlParameter,
    Functional, Gradient, TaylorMode, TaylorReport,
};
use crate::id::VariableId;
use crate::symbolics::{CoefficientRef, FormExpr, Space};
use crate::tape::{Tape, TapeCounters};

/// Name of the state variable in every model.
pub const STATE: &str = "u";
/// Name of the parameter holding the initial condition.
pub const INITIAL_CONDITION: &str = "ic";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Forward Euler Burgers, recorded as a block system with
    /// state-dependent off-diagonal blocks.
    BurgersLinearised,
    /// Backward Euler Burgers solved by Newton's method.
    BurgersImplicit,
    /// Backward Euler heat equation with a constant step operator.
    Heat,
    /// Crank–Nicolson `c_t = ν c_xx - k f'(c)` with a double-well `f`.
    ReactionDiffusion,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [
        ModelKind::BurgersLinearised,
        ModelKind::BurgersImplicit,
        ModelKind::Heat,
        ModelKind::ReactionDiffusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::BurgersLinearised => "burgers-linearised",
            ModelKind::BurgersImplicit => "burgers-implicit",
            ModelKind::Heat => "heat",
            ModelKind::ReactionDiffusion => "reaction-diffusion",
        }
    }

    /// Name of the model's scalar (Real space) parameter.
    pub fn scalar_parameter(self) -> &'static str {
        match self {
            ModelKind::ReactionDiffusion => "k",
            _ => "a",
        }
    }

    pub fn has_dirichlet(self) -> bool {
        self != ModelKind::ReactionDiffusion
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = ModelKind::ALL.iter().map(|k| k.name()).collect();
                Error::InvalidArgument(format!("unknown model `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub model: ModelKind,
    pub n_cells: usize,
    pub dt: f64,
    pub n_steps: usize,
    /// Viscosity or diffusivity.
    pub nu: f64,
    /// Forcing amplitude `a` (Burgers and heat).
    pub forcing: f64,
    /// Reaction coefficient `k` (reaction–diffusion).
    pub reaction: f64,
    pub mode: SolveMode,
    pub policy: CheckpointPolicy,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(model: ModelKind) -> Self {
        Self {
            model,
            // The explicit scheme is unstable at dt = 0.01 on finer meshes.
            n_cells: if model == ModelKind::BurgersLinearised { 16 } else { 64 },
            dt: 0.01,
            n_steps: 50,
            nu: 0.05,
            forcing: 1.0,
            reaction: 0.1,
            mode: SolveMode::Direct,
            policy: match model {
                ModelKind::ReactionDiffusion => CheckpointPolicy::Offline { snapshots: 5 },
                _ => CheckpointPolicy::StoreAll,
            },
            seed: 0,
        }
    }

    /// Rejects invalid settings; returns advisory warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_cells < 2 {
            return bad(format!("need at least 2 cells, got {}", self.n_cells));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("timestep must be positive, got {}", self.dt));
        }
        if self.n_steps == 0 {
            return bad("need at least one timestep".into());
        }
        if !(self.nu > 0.0 && self.nu.is_finite()) {
            return bad(format!("viscosity must be positive, got {}", self.nu));
        }
        if !self.forcing.is_finite() || !self.reaction.is_finite() {
            return bad("model coefficients must be finite".into());
        }
        if self.mode == SolveMode::MatrixFree && self.model == ModelKind::BurgersImplicit {
            return bad("matrix-free solves need symmetric operators; burgers-implicit is not".into());
        }
        self.policy.validate()?;

        let mut warnings = Vec::new();
        if self.model == ModelKind::BurgersLinearised {
            let h = 1.0 / self.n_cells as f64;
            let diffusion = 12.0 * self.nu * self.dt / (h * h);
            if diffusion > 2.0 {
                warnings.push(format!(
                    "explicit scheme: dt·λ_max = {diffusion:.3} exceeds the stability limit 2"
                ));
            }
            let courant = self.dt / h;
            if courant > 1.0 {
                warnings.push(format!("explicit scheme: Courant number {courant:.3} exceeds 1"));
            }
        }
        Ok(warnings)
    }

    fn solver(&self) -> SolverConfig {
        SolverConfig {
            mode: self.mode,
            newton_atol: 1e-14,
            newton_rtol: 1e-12,
            ..SolverConfig::default()
        }
    }
}

/// Control values for one forward run.
#[derive(Debug, Clone, PartialEq)]
pub struct Controls {
    pub initial_condition: FunctionValue,
    pub scalar: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControlKind {
    InitialCondition,
    Scalar,
}

impl FromStr for ControlKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ic" | "initial-condition" => Ok(ControlKind::InitialCondition),
            "scalar" => Ok(ControlKind::Scalar),
            _ => Err(Error::InvalidArgument(format!(
                "unknown control `{s}` (expected ic or scalar)"
            ))),
        }
    }
}

/// Counts and results of an annotated run and its gradient.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub model: ModelKind,
    pub functional: f64,
    pub control: String,
    pub gradient_norm: f64,
    pub gradient_mass_norm: f64,
    pub tape_equations: usize,
    pub timesteps: usize,
    /// Counters after the forward run only.
    pub forward: TapeCounters,
    /// Counters after the forward run and the adjoint sweep.
    pub total: TapeCounters,
    pub checkpoint: CheckpointCounters,
    /// Recomputed steps of the optimal schedule for this policy.
    pub predicted_recomputation: usize,
    pub warnings: Vec<String>,
    pub outputs: Vec<PathBuf>,
}

impl RunReport {
    /// Linear solves of the adjoint sweep over those of the forward run.
    pub fn cost_ratio(&self) -> f64 {
        let fwd = (self.forward.forward_linear_solves + self.forward.newton_iterations) as f64;
        (fwd + self.total.adjoint_linear_solves as f64) / fwd
    }
}

#[derive(Debug)]
pub struct RunOutcome {
    pub report: RunReport,
    pub tape: Tape,
    pub gradient: Gradient,
    pub final_state: FunctionValue,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    mesh: Mesh1D,
    warnings: Vec<String>,
}

fn state_any() -> FormExpr {
    CoefficientRef::var(VariableId::new(STATE, 0, 0), Space::P1).expr()
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let warnings = config.validate()?;
        let mesh = Mesh1D::unit(config.n_cells)?;
        Ok(Self {
            config,
            mesh,
            warnings,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mesh(&self) -> &Mesh1D {
        &self.mesh
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn kind(&self) -> ModelKind {
        self.config.model
    }

    /// `½∫u(T)²` for the Burgers and heat models, `∫₀ᵀ ½∫u² dt` for
    /// reaction–diffusion.
    pub fn functional(&self) -> Functional {
        let integrand = (0.5 * (state_any() * state_any())).integrate();
        match self.kind() {
            ModelKind::ReactionDiffusion => Functional::integrated(integrand),
            _ => Functional::final_time(integrand),
        }
        .expect("rank-0 integrand")
    }

    pub fn control(&self, kind: ControlKind) -> ControlParameter {
        match kind {
            ControlKind::InitialCondition => ControlParameter::InitialCondition(STATE.into()),
            ControlKind::Scalar => ControlParameter::Parameter(self.kind().scalar_parameter().into()),
        }
    }

    pub fn default_controls(&self) -> Controls {
        let initial_condition = match self.kind() {
            ModelKind::ReactionDiffusion => {
                FunctionValue::interpolate(&self.mesh, |x| 0.5 + 0.25 * (2.0 * PI * x).sin())
            }
            _ => FunctionValue::interpolate(&self.mesh, |x| (2.0 * PI * x).sin()),
        };
        let scalar = match self.kind() {
            ModelKind::ReactionDiffusion => self.config.reaction,
            _ => self.config.forcing,
        };
        Controls {
            initial_condition,
            scalar,
        }
    }

    /// Runs the time loop, recording it when `annotate` is set. The values
    /// computed are identical either way.
    pub fn forward(&self, controls: &Controls, annotate: bool) -> Result<Tape> {
        let solver = self.config.solver();
        let mut tape = if annotate {
            Tape::new(self.mesh, solver)?
        } else {
            Tape::unannotated(self.mesh, solver)?
        };
        schemes::run(self, controls, &mut tape)?;
        Ok(tape)
    }

    /// Latest value of the state on a finished tape.
    pub fn final_state(tape: &Tape) -> Result<FunctionValue> {
        let id = tape
            .latest(STATE)
            .ok_or_else(|| Error::UnknownVariable(VariableId::new(STATE, 0, 0)))?;
        Ok(tape.value(&id).cloned().expect("latest version has a value"))
    }

    /// Controls with the given control replaced by `m`.
    pub fn with_control(&self, base: &Controls, kind: ControlKind, m: &DVector<f64>) -> Result<Controls> {
        let mut out = base.clone();
        match kind {
            ControlKind::InitialCondition => {
                out.initial_condition = FunctionValue::new(Space::P1, m.clone(), &self.mesh)?;
            }
            ControlKind::Scalar => {
                if m.len() != 1 {
                    return Err(Error::DimensionMismatch {
                        expected: 1,
                        found: m.len(),
                    });
                }
                out.scalar = m[0];
            }
        }
        Ok(out)
    }

    pub fn control_vector(controls: &Controls, kind: ControlKind) -> DVector<f64> {
        match kind {
            ControlKind::InitialCondition => controls.initial_condition.values.clone(),
            ControlKind::Scalar => DVector::from_element(1, controls.scalar),
        }
    }

    /// The reduced functional `m ↦ J(u(m))`, by an unannotated rerun.
    pub fn j_hat(&self, base: &Controls, kind: ControlKind, m: &DVector<f64>) -> Result<f64> {
        let tape = self.forward(&self.with_control(base, kind, m)?, false)?;
        evaluate_functional(&self.functional(), &tape)
    }

    /// Annotated run at the default controls, then the gradient with
    /// respect to `kind` under the configured checkpoint policy.
    pub fn run(&self, kind: ControlKind) -> Result<RunOutcome> {
        let controls = self.default_controls();
        let tape = self.forward(&controls, true)?;
        let forward = tape.counters();
        let j = self.functional();
        let value = evaluate_functional(&j, &tape)?;
        let control = self.control(kind);
        let gradient = compute_gradient(&j, &control, &tape, &self.config.policy)?;
        let units = tape.units().len();
        let predicted_recomputation = match self.config.policy {
            CheckpointPolicy::StoreAll => 0,
            CheckpointPolicy::Offline { snapshots } => plan_offline(units, snapshots)?
                .validate()?
                .recomputed_steps(units),
        };
        let report = RunReport {
            model: self.kind(),
            functional: value,
            control: control.to_string(),
            gradient_norm: gradient.euclidean_norm(),
            gradient_mass_norm: gradient.mass_weighted_norm(&self.mesh)?,
            tape_equations: tape.equations().len(),
            timesteps: tape.boundaries().len(),
            forward,
            total: tape.counters(),
            checkpoint: gradient.checkpoint,
            predicted_recomputation,
            warnings: self.warnings.clone(),
            outputs: Vec::new(),
        };
        let final_state = Self::final_state(&tape)?;
        Ok(RunOutcome {
            report,
            tape,
            gradient,
            final_state,
        })
    }

    /// Taylor test of the adjoint gradient along a seeded random direction.
    pub fn taylor(
        &self,
        kind: ControlKind,
        mode: TaylorMode,
        h0: f64,
        levels: usize,
        seed: u64,
    ) -> Result<TaylorReport> {
        self.taylor_scaled(kind, mode, h0, levels, seed, 1.0)
    }

    /// As `taylor`, with the gradient multiplied by `scale` first.
    pub fn taylor_scaled(
        &self,
        kind: ControlKind,
        mode: TaylorMode,
        h0: f64,
        levels: usize,
        seed: u64,
        scale: f64,
    ) -> Result<TaylorReport> {
        let controls = self.default_controls();
        let tape = self.forward(&controls, true)?;
        let gradient = compute_gradient(
            &self.functional(),
            &self.control(kind),
            &tape,
            &CheckpointPolicy::StoreAll,
        )?;
        let m0 = Self::control_vector(&controls, kind);
        let direction = random_direction(m0.len(), seed);
        taylor_test(
            |m| self.j_hat(&controls, kind, m),
            &m0,
            &(scale * gradient.value.values),
            &direction,
            h0,
            levels,
            mode,
        )
    }
}

#[cfg(test)]
mod tests;
