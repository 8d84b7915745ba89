use std::fmt;

use serde::{Deserialize, Serialize};

/// Identifies one solved-for value on the tape.
///
/// `iteration` distinguishes repeated solves into the same name within one
/// timestep. Ordering is lexicographic, which is not the record order; the
/// tape keeps its own record index for that.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VariableId {
    pub name: String,
    pub timestep: usize,
    pub iteration: usize,
}

impl VariableId {
    pub fn new(name: impl Into<String>, timestep: usize, iteration: usize) -> Self {
        Self {
            name: name.into(),
            timestep,
            iteration,
        }
    }
}

impl fmt::Display for VariableId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.name, self.timestep, self.iteration)
    }
}
