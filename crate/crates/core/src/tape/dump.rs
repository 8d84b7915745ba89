use serde_json::{json, Value};

use super::{BlockOperator, EquationKind, Guess, Rhs, Tape, TapeEquation};
use crate::id::VariableId;

pub const TAPE_FORMAT_VERSION: u32 = 1;

fn ids<'a>(it: impl IntoIterator<Item = &'a VariableId>) -> Vec<String> {
    it.into_iter().map(|id| id.to_string()).collect()
}

fn equation_json(tape: &Tape, index: usize, eq: &TapeEquation) -> Value {
    let mut v = json!({
        "index": index,
        "target": eq.target.to_string(),
        "space": eq.space.to_string(),
        "timestep": eq.timestep,
        "unit": tape.unit_of(index),
        "parameters": eq.parameters.keys().collect::<Vec<_>>(),
        "dirichlet_nodes": eq.bc.as_ref().map(|bc| bc.nodes().to_vec()),
        "dependencies": ids(&eq.dependencies()),
        "value_present": tape.store.contains_key(&eq.target),
    });
    let obj = v.as_object_mut().expect("object literal");
    match &eq.kind {
        EquationKind::Linear { blocks, rhs } => {
            obj.insert("kind".into(), json!("linear"));
            let blocks: Vec<Value> = blocks
                .iter()
                .map(|b| {
                    let (op, form) = match &b.operator {
                        BlockOperator::Identity(s) if *s == 1.0 => ("identity", None),
                        BlockOperator::Identity(_) => ("negative-identity", None),
                        BlockOperator::Form(f) => ("form", Some(f.render())),
                    };
                    json!({
                        "column": b.column.to_string(),
                        "diagonal": b.column == eq.target,
                        "operator": op,
                        "form": form,
                        "dependencies": ids(&b.dependencies),
                    })
                })
                .collect();
            obj.insert("blocks".into(), json!(blocks));
            let rhs = match rhs {
                Rhs::Zero => json!({ "kind": "zero" }),
                Rhs::Form { form, dependencies } => json!({
                    "kind": "form",
                    "form": form.render(),
                    "dependencies": ids(dependencies),
                }),
                Rhs::Parameter(p) => json!({ "kind": "parameter", "name": p }),
            };
            obj.insert("rhs".into(), rhs);
        }
        EquationKind::Newton { residual, guess } => {
            obj.insert("kind".into(), json!("newton"));
            obj.insert("residual".into(), json!(residual.render()));
            let guess = match guess {
                Guess::Variable(g) => json!({ "kind": "variable", "variable": g.to_string() }),
                Guess::Value(_) => json!({ "kind": "value" }),
            };
            obj.insert("guess".into(), guess);
            obj.insert("newton_iterations".into(), json!(eq.newton_iterations));
        }
    }
    v
}

impl Tape {
    /// Structure of the tape as JSON: equations, blocks, dependency edges,
    /// timestep units and which values are stored. Object keys are sorted.
    pub fn to_json(&self) -> Value {
        let units: Vec<Value> = self
            .units()
            .into_iter()
            .enumerate()
            .map(|(u, r)| json!({ "unit": u, "equations": r.collect::<Vec<_>>() }))
            .collect();
        json!({
            "format": "adjflow-tape",
            "version": TAPE_FORMAT_VERSION,
            "mesh_cells": self.mesh.n_cells(),
            "equations": self
                .equations
                .iter()
                .enumerate()
                .map(|(i, eq)| equation_json(self, i, eq))
                .collect::<Vec<_>>(),
            "units": units,
        })
    }

    pub fn dump_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_json()).expect("tape JSON is serialisable")
    }
}
