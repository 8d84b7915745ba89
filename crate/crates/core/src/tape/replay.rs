use std::collections::BTreeMap;

use serde::Serialize;

use super::{Tape, ValueSource};
use crate::error::Result;
use crate::fem::FunctionValue;
use crate::id::VariableId;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplayEntry {
    pub variable: VariableId,
    /// Largest absolute difference from the stored value; `None` when the
    /// value was not compared or is not stored.
    pub max_abs_deviation: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ReplayReport {
    pub entries: Vec<ReplayEntry>,
    /// First variable, in record order, whose replayed value differs.
    pub first_mismatch: Option<VariableId>,
}

impl ReplayReport {
    pub fn is_consistent(&self) -> bool {
        self.first_mismatch.is_none()
    }

    pub fn max_deviation(&self) -> f64 {
        self.entries
            .iter()
            .filter_map(|e| e.max_abs_deviation)
            .fold(0.0, f64::max)
    }
}

fn deviation(a: &FunctionValue, b: &FunctionValue) -> f64 {
    if a.values.len() != b.values.len() {
        return f64::INFINITY;
    }
    a.values
        .iter()
        .zip(b.values.iter())
        .map(|(x, y)| if x == y { 0.0 } else { (x - y).abs() })
        .fold(0.0, |m, d| if d.is_nan() { f64::INFINITY } else { m.max(d) })
}

impl Tape {
    /// Re-solves equation `i` from the values in `values`.
    pub(crate) fn recompute(&self, i: usize, values: &dyn ValueSource) -> Result<FunctionValue> {
        let eq = &self.equations[i];
        let b = self.bind(eq, &eq.forward_needs(), values, None)?;
        Ok(self.forward_solve(eq, &b)?.0)
    }

    /// Re-runs every equation in record order from the annotated forms and
    /// parameter snapshots alone, optionally comparing each result with the
    /// value recorded during the original run.
    pub fn replay(&self, compare: bool) -> Result<ReplayReport> {
        let mut values: BTreeMap<VariableId, FunctionValue> = BTreeMap::new();
        let mut report = ReplayReport::default();
        for (i, eq) in self.equations.iter().enumerate() {
            let v = self.recompute(i, &values)?;
            let dev = if compare {
                self.store.get(&eq.target).map(|stored| deviation(stored, &v))
            } else {
                None
            };
            if dev.is_some_and(|d| d != 0.0) && report.first_mismatch.is_none() {
                report.first_mismatch = Some(eq.target.clone());
            }
            report.entries.push(ReplayEntry {
                variable: eq.target.clone(),
                max_abs_deviation: dev,
            });
            values.insert(eq.target.clone(), v);
        }
        Ok(report)
    }
}
