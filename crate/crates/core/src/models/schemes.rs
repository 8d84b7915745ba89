use std::f64::consts::PI;

use super::{Controls, Model, ModelKind, INITIAL_CONDITION, STATE};
use crate::error::Result;
use crate::fem::{Bindings, DirichletBC, FunctionValue};
use crate::id::VariableId;
use crate::symbolics::{CoefficientRef, FormExpr, Space};
use crate::tape::{Guess, Tape};

const FORCING: &str = "s";

fn var(id: &VariableId) -> FormExpr {
    CoefficientRef::var(id.clone(), Space::P1).expr()
}

fn param(name: &str, space: Space) -> FormExpr {
    CoefficientRef::param(name, space).expr()
}

fn v() -> FormExpr {
    FormExpr::test(Space::P1)
}

fn w() -> FormExpr {
    FormExpr::trial(Space::P1)
}

/// Spatial forcing profile at time `t`; the model scales it by `a`.
fn forcing_profile(t: f64) -> impl Fn(f64) -> f64 {
    move |x| (PI * x).sin() * (PI * t).cos()
}

/// `f'(c)` for the double well `f(c) = 100 c²(1 - c)²`.
fn well_derivative(c: FormExpr) -> FormExpr {
    200.0 * (c.clone() - 3.0 * c.clone().powi(2) + 2.0 * c.powi(3))
}

pub(super) fn run(model: &Model, controls: &Controls, tape: &mut Tape) -> Result<()> {
    let cfg = model.config();
    let kind = cfg.model;
    let (dt, nu) = (cfg.dt, cfg.nu);
    let none = Bindings::new();
    tape.set_parameter(INITIAL_CONDITION, controls.initial_condition.clone())?;
    tape.set_parameter(kind.scalar_parameter(), FunctionValue::real(controls.scalar))?;
    let scalar = param(kind.scalar_parameter(), Space::REAL);
    let s = param(FORCING, Space::P1);
    let bc = kind
        .has_dirichlet()
        .then(|| DirichletBC::homogeneous(model.mesh()));

    let mut u = tape.annotate_assign_parameter(INITIAL_CONDITION, STATE, &none)?;
    for n in 0..cfg.n_steps {
        let t = n as f64 * dt;
        let t_next = (n + 1) as f64 * dt;
        let un = var(&u);
        u = match kind {
            ModelKind::BurgersLinearised => {
                // M u_{n+1} + (Δt V(u_n) + Δt D - M) u_n = Δt a s_n
                tape.set_parameter(FORCING, FunctionValue::interpolate(model.mesh(), forcing_profile(t)))?;
                tape.set_time(t_next);
                let mass = (w() * v()).integrate();
                let step = (dt * (un.clone() * w().dx() * v()) + (dt * nu) * (w().dx() * v().dx())
                    - w() * v())
                .integrate();
                let rhs = (dt * (scalar.clone() * s.clone() * v())).integrate();
                tape.annotate_system_solve(&mass, &[(step, u.clone())], Some(&rhs), STATE, bc.as_ref(), &none)?
            }
            ModelKind::BurgersImplicit => {
                tape.set_parameter(
                    FORCING,
                    FunctionValue::interpolate(model.mesh(), forcing_profile(t_next)),
                )?;
                tape.set_time(t_next);
                let next = var(&tape.next_id(STATE));
                let residual = ((next.clone() - un) * v()
                    + dt * (next.clone() * next.clone().dx() * v())
                    + (dt * nu) * (next.dx() * v().dx())
                    - dt * (scalar.clone() * s.clone() * v()))
                .integrate();
                tape.annotate_newton_solve(&residual, STATE, Guess::Variable(u.clone()), bc.as_ref(), &none)?
            }
            ModelKind::Heat => {
                tape.set_parameter(
                    FORCING,
                    FunctionValue::interpolate(model.mesh(), forcing_profile(t_next)),
                )?;
                tape.set_time(t_next);
                let lhs = (w() * v() + (dt * nu) * (w().dx() * v().dx())).integrate();
                let rhs = (un * v() + dt * (scalar.clone() * s.clone() * v())).integrate();
                tape.annotate_linear_solve(&lhs, &rhs, STATE, bc.as_ref(), &none)?
            }
            ModelKind::ReactionDiffusion => {
                tape.set_time(t_next);
                let next = var(&tape.next_id(STATE));
                let residual = ((next.clone() - un.clone()) * v()
                    + (0.5 * dt * nu) * ((next.clone().dx() + un.clone().dx()) * v().dx())
                    + (0.5 * dt)
                        * (scalar.clone() * (well_derivative(next) + well_derivative(un)) * v()))
                .integrate();
                tape.annotate_newton_solve(&residual, STATE, Guess::Variable(u.clone()), None, &none)?
            }
        };
        tape.increment_timestep()?;
    }
    Ok(())
}
