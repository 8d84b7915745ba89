use std::collections::{BTreeMap, HashMap};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::fem::{assemble_scalar, assemble_vector, space_dim, Bindings};
use crate::id::VariableId;
use crate::symbolics::{
    extract_dependencies, gateaux_derivative, replace, CoeffId, CoefficientRef, Family, FormExpr,
    Space,
};
use crate::tape::{Tape, ValueSource};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimeMeasure {
    /// The integrand at the final state.
    FinalTime,
    /// The integrand integrated over time with the trapezoidal rule on the
    /// timestep boundaries.
    Integrated,
}

/// A scalar functional of the trajectory.
///
/// Variables in the integrand are matched by name only: their timestep and
/// iteration are placeholders, and each time sample binds the version of
/// that name current at the sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Functional {
    pub integrand: FormExpr,
    pub measure: TimeMeasure,
}

/// One time sample of a functional.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Sample {
    pub time: f64,
    pub weight: f64,
    pub variables: BTreeMap<String, VariableId>,
}

impl Functional {
    pub fn new(integrand: FormExpr, measure: TimeMeasure) -> Result<Self> {
        let rank = integrand.rank()?;
        if rank != 0 {
            return Err(Error::RankMismatch {
                expected: 0,
                found: rank,
            });
        }
        Ok(Self { integrand, measure })
    }

    pub fn final_time(integrand: FormExpr) -> Result<Self> {
        Self::new(integrand, TimeMeasure::FinalTime)
    }

    pub fn integrated(integrand: FormExpr) -> Result<Self> {
        Self::new(integrand, TimeMeasure::Integrated)
    }

    fn names(&self) -> Vec<String> {
        let mut names: Vec<String> = extract_dependencies(&self.integrand)
            .into_iter()
            .map(|id| id.name)
            .collect();
        names.dedup();
        names
    }

    /// Named parameters the integrand reads directly.
    pub fn parameters(&self) -> Vec<String> {
        self.integrand
            .coefficients()
            .into_iter()
            .filter_map(|c| match c.id {
                CoeffId::Param(p) => Some(p),
                CoeffId::Var(_) => None,
            })
            .collect()
    }

    /// Time samples, their quadrature weights and the variable version each
    /// one binds.
    pub fn samples(&self, tape: &Tape) -> Result<Vec<Sample>> {
        let history = tape.history();
        let names = self.names();
        let missing = |name: &str| Error::UnknownVariable(VariableId::new(name, 0, 0));
        let first = |name: &str| {
            history
                .iter()
                .find(|(id, _)| id.name == name)
                .map(|(id, _)| id.clone())
                .ok_or_else(|| missing(name))
        };
        let latest_before = |name: &str, end: usize| -> Result<VariableId> {
            match history[..end].iter().rev().find(|(id, _)| id.name == name) {
                Some((id, _)) => Ok(id.clone()),
                None => first(name),
            }
        };
        let bind = |end: Option<usize>| -> Result<BTreeMap<String, VariableId>> {
            names
                .iter()
                .map(|n| {
                    let id = match end {
                        Some(end) => latest_before(n, end)?,
                        None => first(n)?,
                    };
                    Ok((n.clone(), id))
                })
                .collect()
        };
        match self.measure {
            TimeMeasure::FinalTime => Ok(vec![Sample {
                time: tape.time(),
                weight: 1.0,
                variables: bind(Some(history.len()))?,
            }]),
            TimeMeasure::Integrated => {
                let bounds = tape.boundaries();
                let times = tape.boundary_times();
                if bounds.is_empty() {
                    return Err(Error::InvalidArgument(
                        "a time-integrated functional needs at least one timestep".into(),
                    ));
                }
                let t0 = history.first().map(|(_, t)| *t).unwrap_or(0.0);
                let mut ts = vec![t0];
                ts.extend_from_slice(times);
                let mut samples = Vec::with_capacity(ts.len());
                samples.push(Sample {
                    time: t0,
                    weight: 0.0,
                    variables: bind(None)?,
                });
                for &b in bounds {
                    samples.push(Sample {
                        time: 0.0,
                        weight: 0.0,
                        variables: bind(Some(b))?,
                    });
                }
                for n in 0..samples.len() {
                    samples[n].time = ts[n];
                    let left = if n > 0 { ts[n] - ts[n - 1] } else { 0.0 };
                    let right = if n + 1 < ts.len() { ts[n + 1] - ts[n] } else { 0.0 };
                    samples[n].weight = 0.5 * (left + right);
                }
                Ok(samples)
            }
        }
    }

    /// The integrand with its variables bound to the versions of `sample`.
    pub fn bind_sample(&self, tape: &Tape, sample: &Sample) -> Result<FormExpr> {
        let mut map = BTreeMap::new();
        for written in extract_dependencies(&self.integrand) {
            let actual = &sample.variables[&written.name];
            let space = tape
                .space_of(actual)
                .ok_or_else(|| Error::UnknownVariable(actual.clone()))?;
            map.insert(written, CoefficientRef::var(actual.clone(), space));
        }
        replace(&self.integrand, &map)
    }

    /// Which samples each variable version takes part in, and the form
    /// of each sample; reused across a sweep.
    pub fn attribution(&self, tape: &Tape) -> Result<Attribution> {
        let samples = self.samples(tape)?;
        let mut forms = Vec::with_capacity(samples.len());
        let mut by_variable: HashMap<VariableId, Vec<usize>> = HashMap::new();
        for (s, sample) in samples.iter().enumerate() {
            forms.push(self.bind_sample(tape, sample)?);
            for id in sample.variables.values() {
                let list = by_variable.entry(id.clone()).or_default();
                if list.last() != Some(&s) {
                    list.push(s);
                }
            }
        }
        Ok(Attribution {
            samples,
            forms,
            by_variable,
        })
    }

    /// Samples and bindings as JSON, for inclusion in a tape dump.
    pub fn attribution_json(&self, tape: &Tape) -> Result<Value> {
        let samples = self.samples(tape)?;
        Ok(json!({
            "measure": self.measure,
            "integrand": self.integrand.render(),
            "samples": samples
                .iter()
                .map(|s| json!({
                    "time": s.time,
                    "weight": s.weight,
                    "variables": s.variables.iter()
                        .map(|(k, v)| (k.clone(), Value::from(v.to_string())))
                        .collect::<serde_json::Map<_, _>>(),
                }))
                .collect::<Vec<_>>(),
        }))
    }
}

/// Bindings for every coefficient of `form`: tape variables from `values`,
/// named parameters from the tape's current parameter values.
pub(crate) fn bind_form(form: &FormExpr, tape: &Tape, values: &dyn ValueSource) -> Result<Bindings> {
    let mut b = Bindings::new();
    for c in form.coefficients() {
        let v = match &c.id {
            CoeffId::Var(id) => values
                .value(id)
                .ok_or_else(|| Error::MissingForwardValue(id.clone()))?,
            CoeffId::Param(p) => tape
                .parameter(p)
                .ok_or_else(|| Error::UnboundCoefficient(p.clone()))?,
        };
        b.insert(c.id.clone(), v.clone());
    }
    Ok(b)
}

#[derive(Debug, Clone)]
pub struct Attribution {
    pub samples: Vec<Sample>,
    forms: Vec<FormExpr>,
    by_variable: HashMap<VariableId, Vec<usize>>,
}

impl Attribution {
    pub fn value(&self, tape: &Tape, values: &dyn ValueSource) -> Result<f64> {
        let mut total = 0.0;
        for (sample, form) in self.samples.iter().zip(&self.forms) {
            if sample.weight == 0.0 {
                continue;
            }
            total += sample.weight * assemble_scalar(form, tape.mesh(), &bind_form(form, tape, values)?)?;
        }
        if total.is_finite() {
            Ok(total)
        } else {
            Err(Error::NonFinite)
        }
    }

    /// Every variable version that sample forms involving `id` read.
    pub fn needs(&self, id: &VariableId) -> Vec<VariableId> {
        self.by_variable
            .get(id)
            .into_iter()
            .flatten()
            .flat_map(|&s| self.samples[s].variables.values().cloned())
            .collect()
    }

    pub fn references(&self, id: &VariableId) -> bool {
        self.by_variable.contains_key(id)
    }

    /// `dJ/du_k` as a vector in the dual of `u_k`'s space; zero when the
    /// functional does not involve `u_k`.
    pub fn partial(&self, tape: &Tape, k: &VariableId, values: &dyn ValueSource) -> Result<DVector<f64>> {
        let space = tape
            .space_of(k)
            .ok_or_else(|| Error::UnknownVariable(k.clone()))?;
        let mut out = DVector::zeros(space_dim(space, tape.mesh()));
        let wrt = CoefficientRef::var(k.clone(), space);
        for &s in self.by_variable.get(k).into_iter().flatten() {
            let w = self.samples[s].weight;
            if w == 0.0 {
                continue;
            }
            let form = &self.forms[s];
            let d = gateaux_derivative(form, &wrt, &FormExpr::test(space))?;
            out.axpy(w, &assemble_vector(&d, tape.mesh(), &bind_form(&d, tape, values)?)?, 1.0);
        }
        Ok(out)
    }

    /// Direct derivative of the functional with respect to a named
    /// parameter, in the dual of the parameter's space.
    pub fn parameter_partial(
        &self,
        tape: &Tape,
        name: &str,
        space: Space,
        values: &dyn ValueSource,
    ) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(space_dim(space, tape.mesh()));
        let p = CoefficientRef::param(name, space);
        for (sample, form) in self.samples.iter().zip(&self.forms) {
            if sample.weight == 0.0 || !form.coefficients().contains(&p) {
                continue;
            }
            match space.family {
                Family::Lagrange => {
                    let d = gateaux_derivative(form, &p, &FormExpr::test(space))?;
                    let v = assemble_vector(&d, tape.mesh(), &bind_form(&d, tape, values)?)?;
                    out.axpy(sample.weight, &v, 1.0);
                }
                Family::Real => {
                    let d = gateaux_derivative(form, &p, &FormExpr::constant(1.0))?;
                    out[0] += sample.weight
                        * assemble_scalar(&d, tape.mesh(), &bind_form(&d, tape, values)?)?;
                }
            }
        }
        Ok(out)
    }
}

/// Value of `j` on the trajectory recorded by `tape`.
pub fn evaluate_functional(j: &Functional, tape: &Tape) -> Result<f64> {
    j.attribution(tape)?.value(tape, tape.values())
}

/// `dJ/du_k`, weighted by the time-quadrature coefficients of the samples
/// that bind `k`.
pub fn functional_partial(j: &Functional, k: &VariableId, tape: &Tape) -> Result<DVector<f64>> {
    j.attribution(tape)?.partial(tape, k, tape.values())
}
