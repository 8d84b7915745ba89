use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};

/// One instruction of a checkpointing schedule. Steps are timestep units;
/// state `k` is the state at the start of unit `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    /// Run units `from..to` forward.
    Advance { from: usize, to: usize },
    StoreSnapshot(usize),
    RestoreSnapshot(usize),
    /// Run unit `k` forward and then its adjoint.
    SolveAdjoint(usize),
    DiscardSnapshot(usize),
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Advance { from, to } => write!(f, "ADVANCE {from} {to}"),
            Action::StoreSnapshot(k) => write!(f, "STORE {k}"),
            Action::RestoreSnapshot(k) => write!(f, "RESTORE {k}"),
            Action::SolveAdjoint(k) => write!(f, "ADJOINT {k}"),
            Action::DiscardSnapshot(k) => write!(f, "DISCARD {k}"),
        }
    }
}

impl FromStr for Action {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidSchedule(format!("cannot parse action: {s:?}"));
        let mut parts = s.split_whitespace();
        let name = parts.next().ok_or_else(bad)?;
        let args: Vec<usize> = parts
            .map(|p| p.parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        match (name, args.as_slice()) {
            ("ADVANCE", &[from, to]) => Ok(Action::Advance { from, to }),
            ("STORE", &[k]) => Ok(Action::StoreSnapshot(k)),
            ("RESTORE", &[k]) => Ok(Action::RestoreSnapshot(k)),
            ("ADJOINT", &[k]) => Ok(Action::SolveAdjoint(k)),
            ("DISCARD", &[k]) => Ok(Action::DiscardSnapshot(k)),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schedule {
    pub steps: usize,
    pub snapshots: usize,
    pub actions: Vec<Action>,
}

/// Totals from simulating a schedule.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ScheduleStats {
    pub advanced_steps: usize,
    pub snapshot_writes: usize,
    pub snapshot_reads: usize,
    pub max_live_snapshots: usize,
}

impl ScheduleStats {
    /// Forward steps beyond the single sweep a store-everything run needs.
    pub fn recomputed_steps(&self, steps: usize) -> usize {
        self.advanced_steps.saturating_sub(steps.saturating_sub(1))
    }
}

/// Largest number of steps that can be adjoined with `s` snapshots when no
/// step is advanced more than `r` times: `C(s + r, s)`.
pub fn feasible_steps(s: usize, r: usize) -> u128 {
    // C(s + r, s) built up as a running product stays integral.
    let k = s.min(r) as u128;
    let n = (s + r) as u128;
    (1..=k).fold(1u128, |acc, i| acc * (n - k + i) / i)
}

fn beta(c: usize, r: isize) -> usize {
    if r < 0 {
        0
    } else {
        usize::try_from(feasible_steps(c, r as usize)).unwrap_or(usize::MAX)
    }
}

struct Planner {
    actions: Vec<Action>,
    current: Option<usize>,
}

impl Planner {
    fn goto(&mut self, a: usize) {
        if self.current != Some(a) {
            self.actions.push(Action::RestoreSnapshot(a));
            self.current = Some(a);
        }
    }

    fn advance(&mut self, from: usize, to: usize) {
        if to > from {
            self.actions.push(Action::Advance { from, to });
        }
        self.current = Some(to);
    }

    fn adjoint(&mut self, k: usize) {
        self.actions.push(Action::SolveAdjoint(k));
        self.current = None;
    }

    /// Reverses units `a..b` with `c` snapshots, one of which holds state `a`.
    fn reverse(&mut self, a: usize, b: usize, c: usize) {
        let l = b - a;
        if l == 1 {
            self.goto(a);
            self.adjoint(a);
        } else if c == 1 {
            for k in (a..b).rev() {
                self.goto(a);
                self.advance(a, k);
                self.adjoint(k);
            }
        } else {
            let mut r = 0isize;
            while beta(c, r) < l {
                r += 1;
            }
            let j = beta(c, r - 1).min(l - beta(c - 1, r - 1));
            self.goto(a);
            self.advance(a, a + j);
            self.actions.push(Action::StoreSnapshot(a + j));
            self.reverse(a + j, b, c - 1);
            self.actions.push(Action::DiscardSnapshot(a + j));
            self.reverse(a, a + j, c);
        }
    }
}

/// Binomial schedule for `steps` units and `snapshots` snapshots. The
/// number of advanced steps is the minimum over all valid schedules.
pub fn plan_offline(steps: usize, snapshots: usize) -> Result<Schedule> {
    if steps == 0 || snapshots == 0 {
        return Err(Error::InvalidArgument(format!(
            "schedule needs positive steps and snapshots, got {steps} and {snapshots}"
        )));
    }
    let c = snapshots.min(steps);
    let mut planner = Planner {
        actions: vec![Action::StoreSnapshot(0)],
        current: Some(0),
    };
    planner.reverse(0, steps, c);
    planner.actions.push(Action::DiscardSnapshot(0));
    Ok(Schedule {
        steps,
        snapshots,
        actions: planner.actions,
    })
}

impl Schedule {
    /// Simulates the schedule over symbolic states and checks that it never
    /// holds more than `snapshots` snapshots, that every adjoint step finds
    /// its forward state, and that adjoint steps run from the last unit
    /// down to the first.
    pub fn validate(&self) -> Result<ScheduleStats> {
        let fail = |i: usize, a: &Action, why: &str| {
            Err(Error::InvalidSchedule(format!("action {i} ({a}): {why}")))
        };
        let mut live = BTreeSet::new();
        let mut current = Some(0);
        let mut next_adjoint = self.steps.checked_sub(1);
        let mut stats = ScheduleStats::default();
        for (i, a) in self.actions.iter().enumerate() {
            match *a {
                Action::Advance { from, to } => {
                    if current != Some(from) {
                        return fail(i, a, "not at the starting state");
                    }
                    if to <= from || to >= self.steps {
                        return fail(i, a, "bad range");
                    }
                    stats.advanced_steps += to - from;
                    current = Some(to);
                }
                Action::StoreSnapshot(k) => {
                    if current != Some(k) {
                        return fail(i, a, "state not available");
                    }
                    if !live.insert(k) {
                        return fail(i, a, "snapshot already stored");
                    }
                    if live.len() > self.snapshots {
                        return fail(i, a, "snapshot capacity exceeded");
                    }
                    stats.snapshot_writes += 1;
                    stats.max_live_snapshots = stats.max_live_snapshots.max(live.len());
                }
                Action::RestoreSnapshot(k) => {
                    if !live.contains(&k) {
                        return fail(i, a, "no such snapshot");
                    }
                    stats.snapshot_reads += 1;
                    current = Some(k);
                }
                Action::SolveAdjoint(k) => {
                    if current != Some(k) {
                        return fail(i, a, "forward state not available");
                    }
                    if next_adjoint != Some(k) {
                        return fail(i, a, "adjoint steps out of order");
                    }
                    next_adjoint = k.checked_sub(1);
                    current = None;
                }
                Action::DiscardSnapshot(k) => {
                    if !live.remove(&k) {
                        return fail(i, a, "no such snapshot");
                    }
                }
            }
        }
        if let Some(k) = next_adjoint {
            return Err(Error::InvalidSchedule(format!("adjoint step {k} never runs")));
        }
        Ok(stats)
    }

    /// One line per action, after a `PLAN <steps> <snapshots> <contents>`
    /// header naming what a snapshot holds.
    pub fn dump(&self) -> String {
        let mut out = format!("PLAN {} {} downstream-needed\n", self.steps, self.snapshots);
        for a in &self.actions {
            out.push_str(&a.to_string());
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Schedule> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::InvalidSchedule("empty schedule".into()))?;
        let h: Vec<&str> = header.split_whitespace().collect();
        let (steps, snapshots) = match h.as_slice() {
            ["PLAN", n, s, ..] => (
                n.parse().map_err(|_| Error::InvalidSchedule(header.into()))?,
                s.parse().map_err(|_| Error::InvalidSchedule(header.into()))?,
            ),
            _ => return Err(Error::InvalidSchedule(format!("bad header: {header:?}"))),
        };
        let actions = lines.map(str::parse).collect::<Result<_>>()?;
        Ok(Schedule {
            steps,
            snapshots,
            actions,
        })
    }
}
