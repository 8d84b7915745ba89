//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure.

use std::collections::{BTreeMap, HashMap};
use std::process::ExitCode;
use std::time::Instant;

use adjflow_core::checkpoint::{feasible_steps, plan_offline};
use adjflow_core::fem::{FunctionValue, Mesh1D};
use adjflow_core::gradients::{functional_partial, random_direction};
use adjflow_core::{
    compute_gradient, tlm_derivative, CheckpointPolicy, ControlKind, Model,
    ModelConfig, ModelKind, SolveMode, TaylorMode, VariableId,
};
use nalgebra::{DMatrix, DVector};

type Outcome = Result<String, String>;
type Check = fn() -> Outcome;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rel(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

// Element matrices on a cell of width h, hand-integrated for linear basis
// functions.
fn element_mass(h: f64) -> [[f64; 2]; 2] {
    [[h / 3.0, h / 6.0], [h / 6.0, h / 3.0]]
}

fn global(mesh: &Mesh1D, element: impl Fn(usize) -> [[f64; 2]; 2]) -> DMatrix<f64> {
    let n = mesh.n_nodes();
    let mut a = DMatrix::zeros(n, n);
    for c in 0..mesh.n_cells() {
        let e = element(c);
        for i in 0..2 {
            for j in 0..2 {
                a[(c + i, c + j)] += e[i][j];
            }
        }
    }
    a
}

/// Derivative of `M u_{n+1} + (Δt V(u_n) + Δt ν K - M) u_n` with respect to
/// `u_n`: `Δt V(u_n) + Δt G(u_n) + Δt ν K - M`, with
/// `V(u)_ij = ∫ u φ_j' φ_i` and `G(u)_ij = ∫ φ_j u' φ_i`.
fn step_jacobian(mesh: &Mesh1D, u: &DVector<f64>, dt: f64, nu: f64) -> DMatrix<f64> {
    let h = mesh.h();
    let mass = global(mesh, |_| element_mass(h));
    let stiff = global(mesh, |_| [[1.0 / h, -1.0 / h], [-1.0 / h, 1.0 / h]]);
    let v = global(mesh, |c| {
        let (u0, u1) = (u[c], u[c + 1]);
        let m = element_mass(h);
        let d = [-1.0 / h, 1.0 / h];
        let mut e = [[0.0; 2]; 2];
        for i in 0..2 {
            let int_u_phi = u0 * m[0][i] + u1 * m[1][i];
            for j in 0..2 {
                e[i][j] = d[j] * int_u_phi;
            }
        }
        e
    });
    let g = global(mesh, |c| {
        let slope = (u[c + 1] - u[c]) / h;
        let m = element_mass(h);
        [[slope * m[0][0], slope * m[0][1]], [slope * m[1][0], slope * m[1][1]]]
    });
    dt * v + dt * g + (dt * nu) * stiff - mass
}

fn dense_transpose_oracle() -> Outcome {
    let cfg = ModelConfig {
        n_cells: 4,
        n_steps: 3,
        ..ModelConfig::new(ModelKind::BurgersLinearised)
    };
    let model = Model::new(cfg.clone()).map_err(|e| e.to_string())?;
    let tape = model.forward(&model.default_controls(), true).map_err(|e| e.to_string())?;
    let mesh = model.mesh();
    let n = mesh.n_nodes();
    let ids: Vec<VariableId> = tape.equations().iter().map(|eq| eq.target.clone()).collect();
    let states: Vec<DVector<f64>> = ids.iter().map(|id| tape.value(id).unwrap().values.clone()).collect();
    let blocks = ids.len();
    let boundary = mesh.boundary_nodes();
    let mass = global(mesh, |_| element_mass(mesh.h()));

    // Rows of the full system: u_0 = g, then each step with its Dirichlet
    // rows replaced by the boundary condition.
    let mut a = DMatrix::zeros(blocks * n, blocks * n);
    for i in 0..n {
        a[(i, i)] = 1.0;
    }
    for k in 1..blocks {
        let mut diag = mass.clone();
        let mut off = step_jacobian(mesh, &states[k - 1], cfg.dt, cfg.nu);
        for &b in &boundary {
            diag.row_mut(b).fill(0.0);
            diag[(b, b)] = 1.0;
            off.row_mut(b).fill(0.0);
        }
        a.view_mut((k * n, k * n), (n, n)).copy_from(&diag);
        a.view_mut((k * n, (k - 1) * n), (n, n)).copy_from(&off);
    }
    let mut rhs = DVector::zeros(blocks * n);
    rhs.rows_mut((blocks - 1) * n, n).copy_from(&(&mass * &states[blocks - 1]));
    let oracle = a
        .transpose()
        .lu()
        .solve(&rhs)
        .ok_or("singular stacked system")?;

    let j = model.functional();
    let mut adjoints = BTreeMap::new();
    let mut worst = 0.0f64;
    for (k, id) in ids.iter().enumerate().rev() {
        let dj = functional_partial(&j, id, &tape).map_err(|e| e.to_string())?;
        let row = tape.derive_adjoint_row(id, &adjoints, &dj).map_err(|e| e.to_string())?;
        let z = tape.solve_row(&row).map_err(|e| e.to_string())?;
        let expect = oracle.rows(k * n, n).clone_owned();
        // Boundary rows of a transposed row-replaced system carry values
        // that never reach an interior node or a control; the recorded
        // adjoint keeps them at zero.
        let nodes: Vec<usize> = if k == 0 {
            (0..n).collect()
        } else {
            (1..n - 1).collect()
        };
        let got = DVector::from_iterator(nodes.len(), nodes.iter().map(|&i| z.values[i]));
        let want = DVector::from_iterator(nodes.len(), nodes.iter().map(|&i| expect[i]));
        worst = worst.max(rel(&got, &want));
        adjoints.insert(id.clone(), z);
    }
    let gradient = compute_gradient(
        &j,
        &model.control(ControlKind::InitialCondition),
        &tape,
        &CheckpointPolicy::StoreAll,
    )
    .map_err(|e| e.to_string())?;
    let grad_rel = rel(&gradient.value.values, &oracle.rows(0, n).clone_owned());
    check(
        worst <= 1e-10 && grad_rel <= 1e-10,
        format!("max per-variable rel {worst:.2e}, gradient rel {grad_rel:.2e}"),
    )
}

fn taylor_one_sided() -> Outcome {
    let model = Model::new(ModelConfig::new(ModelKind::ReactionDiffusion)).map_err(|e| e.to_string())?;
    let r = model
        .taylor(ControlKind::InitialCondition, TaylorMode::OneSided, 1e-2, 6, 0)
        .map_err(|e| e.to_string())?;
    let (o0, o1) = r.finest_orders();
    let (o0, o1) = (o0.ok_or("zero remainder")?, o1.ok_or("zero remainder")?);
    check(
        (0.9..=1.1).contains(&o0) && (1.9..=2.1).contains(&o1),
        format!("orders {o0:.4} {o1:.4}"),
    )
}

fn taylor_central() -> Outcome {
    let model = Model::new(ModelConfig::new(ModelKind::BurgersImplicit)).map_err(|e| e.to_string())?;
    let r = model
        .taylor(ControlKind::InitialCondition, TaylorMode::Central, 1e-2, 5, 0)
        .map_err(|e| e.to_string())?;
    let (o0, o1) = r.finest_orders();
    let o1 = o1.ok_or("zero remainder")?;
    check(
        (2.7..=3.4).contains(&o1),
        format!("orders {:.4} {o1:.4}", o0.unwrap_or(f64::NAN)),
    )
}

fn corruption() -> Outcome {
    // Same test as the central-order criterion, with a corrupted gradient.
    let model = Model::new(ModelConfig::new(ModelKind::BurgersImplicit)).map_err(|e| e.to_string())?;
    let r = model
        .taylor_scaled(ControlKind::InitialCondition, TaylorMode::Central, 1e-2, 5, 0, 1.001)
        .map_err(|e| e.to_string())?;
    let o1 = r.finest_orders().1.ok_or("zero remainder")?;
    check(o1 < 1.2, format!("corrected order {o1:.4} with gradient scaled by 1.001"))
}

/// Fewest advances to reverse `l` steps from a stored state with `c`
/// snapshot slots, one of which holds that state.
fn dp_advances(l: usize, c: usize, memo: &mut HashMap<(usize, usize), usize>) -> usize {
    if l == 1 {
        return 0;
    }
    if c == 1 {
        return l * (l - 1) / 2;
    }
    if let Some(&v) = memo.get(&(l, c)) {
        return v;
    }
    let best = (1..l)
        .map(|j| j + dp_advances(l - j, c - 1, memo) + dp_advances(j, c, memo))
        .min()
        .unwrap();
    memo.insert((l, c), best);
    best
}

fn checkpointing() -> Outcome {
    let (n, s) = (10, 3);
    let cfg = ModelConfig {
        n_steps: n,
        ..ModelConfig::new(ModelKind::ReactionDiffusion)
    };
    let model = Model::new(cfg).map_err(|e| e.to_string())?;
    let tape = model.forward(&model.default_controls(), true).map_err(|e| e.to_string())?;
    let j = model.functional();
    let m = model.control(ControlKind::InitialCondition);
    let all = compute_gradient(&j, &m, &tape, &CheckpointPolicy::StoreAll).map_err(|e| e.to_string())?;
    let off = compute_gradient(&j, &m, &tape, &CheckpointPolicy::Offline { snapshots: s })
        .map_err(|e| e.to_string())?;
    let identical = all.value.values == off.value.values;
    let mut memo = HashMap::new();
    let dp = dp_advances(n, s, &mut memo);
    let stats = plan_offline(n, s)
        .and_then(|p| p.validate())
        .map_err(|e| e.to_string())?;
    let c = off.checkpoint;

    // Minimal advances from the DP against the closed form built on the
    // binomial capacities.
    let mut closed_form_ok = true;
    for l in 1..=20usize {
        for c in 1..=5usize {
            let r = (0..).find(|&r| feasible_steps(c, r) >= l as u128).unwrap();
            // r·l - C(c + r, c + 1) for β(c, r - 1) < l ≤ β(c, r)
            let expect = if r == 0 {
                0
            } else {
                r as i128 * l as i128 - feasible_steps(c + 1, r - 1) as i128
            };
            if dp_advances(l, c, &mut memo) as i128 != expect {
                closed_form_ok = false;
            }
        }
    }
    check(
        identical
            && c.forward_steps == dp
            && c.recomputed_steps == dp - (n - 1)
            && stats.max_live_snapshots <= s
            && c.max_live_snapshots <= s
            && closed_form_ok,
        format!(
            "bit-identical {identical}, advances {} (DP {dp}), recomputed {}, live {}, binomial closed form {}",
            c.forward_steps, c.recomputed_steps, c.max_live_snapshots, closed_form_ok
        ),
    )
}

fn cost_accounting() -> Outcome {
    let model = Model::new(ModelConfig::new(ModelKind::BurgersImplicit)).map_err(|e| e.to_string())?;
    let out = model.run(ControlKind::InitialCondition).map_err(|e| e.to_string())?;
    let r = &out.report;
    let steps = r.timesteps;
    let per_step_adjoint = r.total.adjoint_linear_solves as f64 / steps as f64;
    let min_newton = out
        .tape
        .equations()
        .iter()
        .filter(|eq| eq.is_newton())
        .map(|eq| eq.newton_iterations)
        .min()
        .unwrap_or(0);
    check(
        r.total.adjoint_linear_solves == steps && min_newton >= 2 && r.cost_ratio() <= 1.5,
        format!(
            "adjoint linear solves per step {per_step_adjoint}, min Newton iterations per step {min_newton}, ratio {:.3}",
            r.cost_ratio()
        ),
    )
}

fn duality() -> Outcome {
    let mut worst = 0.0f64;
    for kind in ModelKind::ALL {
        let model = Model::new(ModelConfig::new(kind)).map_err(|e| e.to_string())?;
        let tape = model.forward(&model.default_controls(), true).map_err(|e| e.to_string())?;
        let j = model.functional();
        for ck in [ControlKind::InitialCondition, ControlKind::Scalar] {
            let m = model.control(ck);
            let g = compute_gradient(&j, &m, &tape, &CheckpointPolicy::StoreAll).map_err(|e| e.to_string())?;
            for seed in 0..3 {
                let d = random_direction(g.value.len(), seed);
                let dir = FunctionValue {
                    space: g.value.space,
                    values: d.clone(),
                };
                let adjoint = g.value.values.dot(&d);
                let tlm = tlm_derivative(&j, &m, &dir, &tape).map_err(|e| e.to_string())?;
                let r = (adjoint - tlm).abs() / tlm.abs().max(f64::MIN_POSITIVE);
                worst = worst.max(r);
            }
        }
    }
    check(worst <= 1e-10, format!("max rel {worst:.2e} over 4 models, 2 controls, 3 directions"))
}

fn replay() -> Outcome {
    let model = Model::new(ModelConfig::new(ModelKind::Heat)).map_err(|e| e.to_string())?;
    let mut tape = model.forward(&model.default_controls(), true).map_err(|e| e.to_string())?;
    let clean = tape.replay(true).map_err(|e| e.to_string())?;
    let victim = tape.equations()[17].target.clone();
    let mut value = tape.value(&victim).unwrap().clone();
    value.values[10] += 1e-9;
    tape.overwrite_value(&victim, value).map_err(|e| e.to_string())?;
    let dirty = tape.replay(true).map_err(|e| e.to_string())?;
    check(
        clean.is_consistent()
            && clean.max_deviation() == 0.0
            && dirty.first_mismatch.as_ref() == Some(&victim),
        format!(
            "clean deviation {:e}, mutation of {victim} flagged at {}",
            clean.max_deviation(),
            dirty
                .first_mismatch
                .as_ref()
                .map_or("nothing".to_string(), |v| v.to_string())
        ),
    )
}

fn matrix_free_parity() -> Outcome {
    let mut worst = 0.0f64;
    for kind in [ModelKind::Heat, ModelKind::BurgersLinearised] {
        let mut grads = Vec::new();
        for mode in [SolveMode::Direct, SolveMode::MatrixFree] {
            let model = Model::new(ModelConfig {
                mode,
                ..ModelConfig::new(kind)
            })
            .map_err(|e| e.to_string())?;
            let tape = model.forward(&model.default_controls(), true).map_err(|e| e.to_string())?;
            let g = compute_gradient(
                &model.functional(),
                &model.control(ControlKind::InitialCondition),
                &tape,
                &CheckpointPolicy::StoreAll,
            )
            .map_err(|e| e.to_string())?;
            grads.push(g.value.values);
        }
        worst = worst.max(rel(&grads[1], &grads[0]));
    }
    check(worst <= 1e-8, format!("max rel {worst:.2e}"))
}

fn main() -> ExitCode {
    let criteria: [(&str, Check); 9] = [
        ("dense-transpose oracle", dense_transpose_oracle),
        ("taylor one-sided orders", taylor_one_sided),
        ("taylor central orders", taylor_central),
        ("gradient corruption sensitivity", corruption),
        ("checkpointing equivalence and optimality", checkpointing),
        ("solve-count cost accounting", cost_accounting),
        ("adjoint-tlm duality", duality),
        ("replay consistency", replay),
        ("matrix-free parity", matrix_free_parity),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {}: {name}: {detail} ({secs:.2} s)", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {}: {name}: {detail} ({secs:.2} s)", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
