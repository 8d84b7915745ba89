//! Offline binomial checkpointing of the adjoint sweep.
//!
//! A schedule is planned over the timestep units of a tape. Executing it
//! keeps only snapshots of the values that later units need, and recomputes
//! evicted forward values from the nearest snapshot on demand.

mod executor;
mod schedule;

pub use executor::{execute_schedule, execute_with_checkpoints, AdjointDriver, CheckpointCounters};
pub use schedule::{feasible_steps, plan_offline, Action, Schedule, ScheduleStats};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum CheckpointPolicy {
    /// Keep every forward value for the whole sweep.
    StoreAll,
    /// Plan with at most `snapshots` live snapshots, counting the one at
    /// the initial state.
    Offline { snapshots: usize },
}

impl CheckpointPolicy {
    pub fn validate(&self) -> Result<()> {
        match self {
            CheckpointPolicy::Offline { snapshots: 0 } => Err(Error::InvalidConfig(
                "checkpointing needs at least one snapshot".into(),
            )),
            _ => Ok(()),
        }
    }
}

impl std::fmt::Display for CheckpointPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CheckpointPolicy::StoreAll => write!(f, "store-all"),
            CheckpointPolicy::Offline { snapshots } => write!(f, "offline({snapshots})"),
        }
    }
}
