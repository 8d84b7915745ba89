use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::ops::Range;

use serde::Serialize;

use super::schedule::{plan_offline, Action, Schedule};
use super::CheckpointPolicy;
use crate::error::{Error, Result};
use crate::fem::FunctionValue;
use crate::id::VariableId;
use crate::tape::{Tape, ValueSource};

/// The adjoint computation run unit by unit, last unit first.
pub trait AdjointDriver {
    /// Forward values the adjoint of `unit` reads beyond the linearisation
    /// of its own equations, such as those of a functional.
    fn extra_needs(&self, _tape: &Tape, _unit: usize) -> BTreeSet<VariableId> {
        BTreeSet::new()
    }

    /// Runs the adjoint of the equations in `range`, with every needed
    /// forward value available in `values`.
    fn adjoint_unit(
        &mut self,
        tape: &Tape,
        unit: usize,
        range: Range<usize>,
        values: &dyn ValueSource,
    ) -> Result<()>;
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CheckpointCounters {
    /// Units run forward by `ADVANCE` actions.
    pub forward_steps: usize,
    /// Forward steps beyond a single sweep.
    pub recomputed_steps: usize,
    /// Units run forward immediately before their adjoint.
    pub turn_steps: usize,
    pub snapshot_writes: usize,
    pub snapshot_reads: usize,
    pub max_live_snapshots: usize,
    pub peak_snapshot_bytes: usize,
}

fn bytes(values: &BTreeMap<VariableId, FunctionValue>) -> usize {
    values.values().map(|v| v.len() * std::mem::size_of::<f64>()).sum()
}

/// For each tape variable, the last unit that reads it.
fn last_uses(tape: &Tape, driver: &dyn AdjointDriver) -> HashMap<VariableId, usize> {
    let mut last = HashMap::new();
    for (u, range) in tape.units().into_iter().enumerate() {
        let mut needs = driver.extra_needs(tape, u);
        for eq in &tape.equations()[range] {
            needs.extend(eq.forward_needs());
            needs.extend(eq.linearisation_needs());
        }
        for id in needs {
            last.insert(id, u);
        }
    }
    last
}

struct Executor<'a> {
    tape: &'a Tape,
    units: Vec<Range<usize>>,
    last_use: HashMap<VariableId, usize>,
    /// Values live at the start of unit `state`.
    working: BTreeMap<VariableId, FunctionValue>,
    state: Option<usize>,
    snapshots: BTreeMap<usize, BTreeMap<VariableId, FunctionValue>>,
    counters: CheckpointCounters,
}

impl Executor<'_> {
    fn run_unit(&self, u: usize, values: &mut BTreeMap<VariableId, FunctionValue>) -> Result<()> {
        for i in self.units[u].clone() {
            let v = self.tape.recompute(i, values)?;
            values.insert(self.tape.equations()[i].target.clone(), v);
        }
        Ok(())
    }

    fn state(&self, action: &Action, expected: usize) -> Result<()> {
        if self.state == Some(expected) {
            Ok(())
        } else {
            Err(Error::InvalidSchedule(format!(
                "{action}: forward state {expected} is not current"
            )))
        }
    }

    fn apply(&mut self, action: &Action, driver: &mut dyn AdjointDriver) -> Result<()> {
        match *action {
            Action::Advance { from, to } => {
                self.state(action, from)?;
                for u in from..to {
                    let mut values = std::mem::take(&mut self.working);
                    self.run_unit(u, &mut values)?;
                    let last_use = &self.last_use;
                    values.retain(|id, _| last_use.get(id).is_some_and(|&l| l > u));
                    self.working = values;
                    self.counters.forward_steps += 1;
                }
                self.state = Some(to);
            }
            Action::StoreSnapshot(k) => {
                self.state(action, k)?;
                self.snapshots.insert(k, self.working.clone());
                self.counters.snapshot_writes += 1;
                self.counters.max_live_snapshots =
                    self.counters.max_live_snapshots.max(self.snapshots.len());
                let total: usize = self.snapshots.values().map(bytes).sum();
                self.counters.peak_snapshot_bytes = self.counters.peak_snapshot_bytes.max(total);
            }
            Action::RestoreSnapshot(k) => {
                self.working = self
                    .snapshots
                    .get(&k)
                    .ok_or_else(|| Error::InvalidSchedule(format!("{action}: no such snapshot")))?
                    .clone();
                self.counters.snapshot_reads += 1;
                self.state = Some(k);
            }
            Action::SolveAdjoint(k) => {
                self.state(action, k)?;
                let mut values = std::mem::take(&mut self.working);
                self.run_unit(k, &mut values)?;
                self.counters.turn_steps += 1;
                driver.adjoint_unit(self.tape, k, self.units[k].clone(), &values)?;
                self.state = None;
            }
            Action::DiscardSnapshot(k) => {
                self.snapshots.remove(&k);
            }
        }
        Ok(())
    }
}

/// Runs the adjoint of `tape` under `schedule`, recomputing forward values
/// from snapshots. Only the equations, parameter snapshots and boundary
/// data recorded on the tape are used; stored forward values are not read.
pub fn execute_schedule(
    tape: &Tape,
    schedule: &Schedule,
    driver: &mut dyn AdjointDriver,
) -> Result<CheckpointCounters> {
    let units = tape.units();
    if schedule.steps != units.len() {
        return Err(Error::ScheduleMismatch {
            schedule: schedule.steps,
            tape: units.len(),
        });
    }
    schedule.validate()?;
    let mut exec = Executor {
        tape,
        last_use: last_uses(tape, driver),
        units,
        working: BTreeMap::new(),
        state: Some(0),
        snapshots: BTreeMap::new(),
        counters: CheckpointCounters::default(),
    };
    for action in &schedule.actions {
        exec.apply(action, driver)?;
    }
    let mut counters = exec.counters;
    counters.recomputed_steps = counters
        .forward_steps
        .saturating_sub(schedule.steps.saturating_sub(1));
    Ok(counters)
}

/// Runs the adjoint of `tape` unit by unit, last unit first, under
/// `policy`. The driver sees the same values whatever the policy.
pub fn execute_with_checkpoints(
    tape: &Tape,
    policy: &CheckpointPolicy,
    driver: &mut dyn AdjointDriver,
) -> Result<CheckpointCounters> {
    policy.validate()?;
    if tape.equations().is_empty() {
        return Err(Error::InvalidArgument("the tape has no equations".into()));
    }
    match *policy {
        CheckpointPolicy::StoreAll => {
            for (u, range) in tape.units().into_iter().enumerate().rev() {
                driver.adjoint_unit(tape, u, range, tape.values())?;
            }
            Ok(CheckpointCounters::default())
        }
        CheckpointPolicy::Offline { snapshots } => {
            let schedule = plan_offline(tape.units().len(), snapshots)?;
            execute_schedule(tape, &schedule, driver)
        }
    }
}

#[cfg(test)]
mod tests {
    use nalgebra::DVector;

    use super::*;
    use crate::checkpoint::ScheduleStats;
    use crate::fem::{Bindings, DirichletBC, Mesh1D, SolverConfig};
    use crate::symbolics::{CoefficientRef, FormExpr, Space};
    use crate::tape::Guess;

    fn coeff(id: &VariableId) -> FormExpr {
        CoefficientRef::var(id.clone(), Space::P1).expr()
    }

    /// Newton steps with two fields per step, so that snapshots carry more
    /// than one value and some values skip a unit.
    fn tape(steps: usize) -> Tape {
        let mesh = Mesh1D::unit(8).unwrap();
        let mut tape = Tape::new(mesh, SolverConfig::default()).unwrap();
        let ic = FunctionValue::interpolate(&mesh, |x| (3.0 * x).sin());
        tape.set_parameter("ic", ic).unwrap();
        let v = FormExpr::test(Space::P1);
        let mut u = tape
            .annotate_assign_parameter("ic", "u", &Bindings::new())
            .unwrap();
        let first = u.clone();
        tape.increment_timestep().unwrap();
        let bc = DirichletBC::homogeneous(&mesh);
        for _ in 0..steps {
            let next = coeff(&tape.next_id("u"));
            let residual = ((next.clone() - coeff(&u)) * v.clone()
                + 0.05 * (next.clone().dx() * v.clone().dx())
                + 0.05 * (next.powi(3) * v.clone())
                - 0.01 * (coeff(&first) * v.clone()))
            .integrate();
            u = tape
                .annotate_newton_solve(&residual, "u", Guess::Variable(u.clone()), Some(&bc), &Bindings::new())
                .unwrap();
            tape.annotate_assign(&u, "w").unwrap();
            tape.increment_timestep().unwrap();
        }
        tape
    }

    /// Adjoint of `J = sum of the final u`, keeping every adjoint value.
    struct Recorder {
        pending: BTreeMap<VariableId, DVector<f64>>,
        adjoints: Vec<(VariableId, DVector<f64>)>,
        units: Vec<usize>,
    }

    impl AdjointDriver for Recorder {
        fn adjoint_unit(
            &mut self,
            tape: &Tape,
            unit: usize,
            range: Range<usize>,
            values: &dyn ValueSource,
        ) -> Result<()> {
            self.units.push(unit);
            let n = tape.equations().len();
            for i in range.rev() {
                let dim = tape.mesh().n_nodes();
                let dj = if i + 2 == n {
                    DVector::from_element(dim, 1.0)
                } else {
                    DVector::zeros(dim)
                };
                let z = tape.adjoint_step(i, dj, &mut self.pending, values)?;
                self.adjoints.push((tape.equations()[i].target.clone(), z.values));
            }
            Ok(())
        }
    }

    fn recorder() -> Recorder {
        Recorder {
            pending: BTreeMap::new(),
            adjoints: Vec::new(),
            units: Vec::new(),
        }
    }

    #[test]
    fn checkpointed_adjoint_is_bit_identical_to_store_all() {
        let tape = tape(10);
        let mut reference = recorder();
        let c = execute_with_checkpoints(&tape, &CheckpointPolicy::StoreAll, &mut reference).unwrap();
        assert_eq!(c, CheckpointCounters::default());
        assert_eq!(reference.units, (0..11).rev().collect::<Vec<_>>());

        for s in 1..=12 {
            let mut run = recorder();
            let c = execute_with_checkpoints(&tape, &CheckpointPolicy::Offline { snapshots: s }, &mut run)
                .unwrap();
            assert_eq!(run.adjoints, reference.adjoints, "s={s}");
            let stats: ScheduleStats = plan_offline(11, s).unwrap().validate().unwrap();
            assert_eq!(c.forward_steps, stats.advanced_steps);
            assert_eq!(c.recomputed_steps, stats.recomputed_steps(11));
            assert_eq!(c.snapshot_reads, stats.snapshot_reads);
            assert_eq!(c.turn_steps, 11);
            assert!(c.max_live_snapshots <= s);
        }
    }

    #[test]
    fn full_capacity_recomputes_nothing() {
        let tape = tape(10);
        let mut run = recorder();
        let c = execute_with_checkpoints(&tape, &CheckpointPolicy::Offline { snapshots: 11 }, &mut run)
            .unwrap();
        assert_eq!(c.recomputed_steps, 0);
    }

    #[test]
    fn snapshots_hold_only_values_needed_later() {
        let tape = tape(4);
        let mut run = recorder();
        let c = execute_with_checkpoints(&tape, &CheckpointPolicy::Offline { snapshots: 5 }, &mut run)
            .unwrap();
        // Snapshot k > 1 keeps the previous u and the initial condition,
        // snapshot 1 only the initial condition; no w is read again.
        let per_value = 9 * 8;
        assert_eq!(c.peak_snapshot_bytes, per_value * (1 + 2 + 2 + 2));
    }

    #[test]
    fn mismatched_schedule_is_rejected() {
        let tape = tape(3);
        let sched = plan_offline(5, 2).unwrap();
        let err = execute_schedule(&tape, &sched, &mut recorder()).unwrap_err();
        assert!(matches!(err, Error::ScheduleMismatch { schedule: 5, tape: 4 }));
    }

    #[test]
    fn zero_capacity_is_rejected() {
        let tape = tape(2);
        let err = execute_with_checkpoints(&tape, &CheckpointPolicy::Offline { snapshots: 0 }, &mut recorder());
        assert!(err.is_err());
    }
}
