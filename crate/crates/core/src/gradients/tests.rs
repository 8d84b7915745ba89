use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use super::*;
use crate::fem::{Bindings, DirichletBC, SolverConfig};
use crate::symbolics::CoefficientRef;
use crate::tape::Guess;

const DT: f64 = 0.05;

fn u_any() -> FormExpr {
    CoefficientRef::var(VariableId::new("u", 0, 0), Space::P1).expr()
}

fn coeff(id: &VariableId) -> FormExpr {
    CoefficientRef::var(id.clone(), Space::P1).expr()
}

fn v() -> FormExpr {
    FormExpr::test(Space::P1)
}

fn w() -> FormExpr {
    FormExpr::trial(Space::P1)
}

fn half_square() -> Functional {
    Functional::final_time((0.5 * (u_any() * u_any())).integrate()).unwrap()
}

fn hand_mass(mesh: &Mesh1D) -> DMatrix<f64> {
    let n = mesh.n_cells();
    let h = mesh.h();
    let mut m = DMatrix::zeros(n + 1, n + 1);
    for c in 0..n {
        m[(c, c)] += h / 3.0;
        m[(c + 1, c + 1)] += h / 3.0;
        m[(c, c + 1)] += h / 6.0;
        m[(c + 1, c)] += h / 6.0;
    }
    m
}

fn ic(mesh: &Mesh1D) -> FunctionValue {
    FunctionValue::interpolate(mesh, |x| (std::f64::consts::PI * x).sin() + x)
}

/// Forced heat equation, implicit Euler, forcing amplitude `a`.
fn heat(mesh: &Mesh1D, ic: FunctionValue, a: f64, steps: usize) -> Tape {
    let mut tape = Tape::new(*mesh, SolverConfig::default()).unwrap();
    tape.set_parameter("ic", ic).unwrap();
    tape.set_parameter("a", FunctionValue::real(a)).unwrap();
    let amp = CoefficientRef::param("a", Space::REAL).expr();
    let mut u = tape
        .annotate_assign_parameter("ic", "u", &Bindings::new())
        .unwrap();
    tape.increment_timestep().unwrap();
    let bc = DirichletBC::homogeneous(mesh);
    let lhs = (w() * v() + DT * (w().dx() * v().dx())).integrate();
    let x = FormExpr::x();
    for n in 0..steps {
        tape.set_time((n + 1) as f64 * DT);
        let f = x.clone() - x.clone().powi(2);
        let rhs = (coeff(&u) * v() + DT * (amp.clone() * f * v())).integrate();
        u = tape
            .annotate_linear_solve(&lhs, &rhs, "u", Some(&bc), &Bindings::new())
            .unwrap();
        tape.increment_timestep().unwrap();
    }
    tape
}

/// Implicit `u_t = 0.1 u_xx - u^2 + a` by Newton.
fn nonlinear(mesh: &Mesh1D, ic: FunctionValue, a: f64, steps: usize) -> Tape {
    let config = SolverConfig {
        newton_atol: 1e-14,
        newton_rtol: 1e-14,
        ..SolverConfig::default()
    };
    let mut tape = Tape::new(*mesh, config).unwrap();
    tape.set_parameter("ic", ic).unwrap();
    tape.set_parameter("a", FunctionValue::real(a)).unwrap();
    let amp = CoefficientRef::param("a", Space::REAL).expr();
    let mut u = tape
        .annotate_assign_parameter("ic", "u", &Bindings::new())
        .unwrap();
    tape.increment_timestep().unwrap();
    for n in 0..steps {
        tape.set_time((n + 1) as f64 * DT);
        let next = coeff(&tape.next_id("u"));
        let residual = ((next.clone() - coeff(&u)) * v()
            + DT * 0.1 * (next.clone().dx() * v().dx())
            + DT * (next.powi(2) * v())
            - DT * (amp.clone() * v()))
        .integrate();
        u = tape
            .annotate_newton_solve(&residual, "u", Guess::Variable(u.clone()), None, &Bindings::new())
            .unwrap();
        tape.increment_timestep().unwrap();
    }
    tape
}

fn ic_control() -> ControlParameter {
    ControlParameter::InitialCondition("u".into())
}

fn amp_control() -> ControlParameter {
    ControlParameter::Parameter("a".into())
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

#[test]
fn final_square_of_one_is_one() {
    let mesh = Mesh1D::unit(7).unwrap();
    let mut tape = Tape::new(mesh, SolverConfig::default()).unwrap();
    tape.set_parameter("ic", FunctionValue::interpolate(&mesh, |_| 1.0))
        .unwrap();
    tape.annotate_assign_parameter("ic", "u", &Bindings::new())
        .unwrap();
    let j = Functional::final_time((u_any() * u_any()).integrate()).unwrap();
    assert!((evaluate_functional(&j, &tape).unwrap() - 1.0).abs() < 1e-14);
}

#[test]
fn integrated_constant_state_is_exact() {
    let mesh = Mesh1D::unit(5).unwrap();
    let mut tape = Tape::new(mesh, SolverConfig::default()).unwrap();
    tape.set_parameter("ic", FunctionValue::interpolate(&mesh, |_| 2.0))
        .unwrap();
    let mut u = tape
        .annotate_assign_parameter("ic", "u", &Bindings::new())
        .unwrap();
    tape.increment_timestep().unwrap();
    let times = [0.1, 0.25, 0.3, 0.7];
    for t in times {
        tape.set_time(t);
        u = tape.annotate_assign(&u, "u").unwrap();
        tape.increment_timestep().unwrap();
    }
    let j = Functional::integrated((u_any() * u_any()).integrate()).unwrap();
    assert!((evaluate_functional(&j, &tape).unwrap() - 0.7 * 4.0).abs() < 1e-13);

    let samples = j.samples(&tape).unwrap();
    let weights: Vec<f64> = samples.iter().map(|s| s.weight).collect();
    // Boundary times 0, 0, 0.1, 0.25, 0.3, 0.7 after the initial sample.
    let expected = [0.0, 0.05, 0.125, 0.1, 0.225, 0.2];
    assert_eq!(weights.len(), expected.len());
    for (a, b) in weights.iter().zip(expected) {
        assert!((a - b).abs() < 1e-15, "{weights:?}");
    }
    assert_eq!(samples[3].variables["u"], VariableId::new("u", 2, 0));
}

#[test]
fn integrated_measure_needs_a_timestep() {
    let mesh = Mesh1D::unit(3).unwrap();
    let mut tape = Tape::new(mesh, SolverConfig::default()).unwrap();
    tape.set_parameter("ic", ic(&mesh)).unwrap();
    tape.annotate_assign_parameter("ic", "u", &Bindings::new())
        .unwrap();
    let j = Functional::integrated((u_any() * u_any()).integrate()).unwrap();
    assert!(evaluate_functional(&j, &tape).is_err());
}

#[test]
fn functional_must_be_scalar() {
    assert!(Functional::final_time((u_any() * v()).integrate()).is_err());
}

#[test]
fn partial_of_half_square_is_mass_times_state() {
    let mesh = Mesh1D::unit(6).unwrap();
    let tape = heat(&mesh, ic(&mesh), 1.0, 3);
    let last = tape.latest("u").unwrap();
    let uf = tape.value(&last).unwrap().values.clone();
    let p = functional_partial(&half_square(), &last, &tape).unwrap();
    assert!((&p - hand_mass(&mesh) * &uf).amax() < 1e-14);

    let first = VariableId::new("u", 0, 0);
    assert_eq!(functional_partial(&half_square(), &first, &tape).unwrap().amax(), 0.0);
}

#[test]
fn gradient_of_initial_functional_is_mass_times_state() {
    let mesh = Mesh1D::unit(6).unwrap();
    let mut tape = Tape::new(mesh, SolverConfig::default()).unwrap();
    let u0 = ic(&mesh);
    tape.set_parameter("ic", u0.clone()).unwrap();
    tape.annotate_assign_parameter("ic", "u", &Bindings::new())
        .unwrap();
    let g = compute_gradient(&half_square(), &ic_control(), &tape, &CheckpointPolicy::StoreAll)
        .unwrap();
    assert!((&g.value.values - hand_mass(&mesh) * &u0.values).amax() < 1e-14);
}

#[test]
fn single_linear_solve_adjoint_is_transposed_solve() {
    let mesh = Mesh1D::unit(5).unwrap();
    let tape = heat(&mesh, ic(&mesh), 0.0, 1);
    let sol = compute_adjoint(&half_square(), &tape, &CheckpointPolicy::StoreAll).unwrap();
    assert_eq!(sol.adjoints.len(), 2);
    let (id, z) = &sol.adjoints[0];
    assert_eq!(id, &VariableId::new("u", 1, 0));

    let m = hand_mass(&mesh);
    let mut k = DMatrix::zeros(6, 6);
    for c in 0..5 {
        let s = 1.0 / mesh.h();
        k[(c, c)] += s;
        k[(c + 1, c + 1)] += s;
        k[(c, c + 1)] -= s;
        k[(c + 1, c)] -= s;
    }
    let mut at = (&m + DT * k).transpose();
    let mut rhs = &m * &tape.value(id).unwrap().values;
    for b in mesh.boundary_nodes() {
        at.row_mut(b).fill(0.0);
        at[(b, b)] = 1.0;
        rhs[b] = 0.0;
    }
    let expected = at.lu().solve(&rhs).unwrap();
    assert!((&z.values - expected).amax() < 1e-13);
}

fn fd_gradient_check(build: impl Fn(FunctionValue, f64) -> Tape, j: &Functional, mesh: &Mesh1D) {
    let base = build(ic(mesh), 0.7);
    let eps = 1e-6;
    let dir = random_direction(mesh.n_nodes(), 3);

    let g = compute_gradient(j, &ic_control(), &base, &CheckpointPolicy::StoreAll).unwrap();
    let shifted = |s: f64| {
        let mut f = ic(mesh);
        f.values.axpy(s * eps, &dir, 1.0);
        evaluate_functional(j, &build(f, 0.7)).unwrap()
    };
    let fd = (shifted(1.0) - shifted(-1.0)) / (2.0 * eps);
    assert!(rel(g.value.values.dot(&dir), fd) < 1e-6, "{} vs {fd}", g.value.values.dot(&dir));

    let g = compute_gradient(j, &amp_control(), &base, &CheckpointPolicy::StoreAll).unwrap();
    assert_eq!(g.value.space, Space::REAL);
    let shifted = |s: f64| evaluate_functional(j, &build(ic(mesh), 0.7 + s * eps)).unwrap();
    let fd = (shifted(1.0) - shifted(-1.0)) / (2.0 * eps);
    assert!(rel(g.value.values[0], fd) < 1e-6, "{} vs {fd}", g.value.values[0]);
}

#[test]
fn heat_gradients_match_finite_differences() {
    let mesh = Mesh1D::unit(10).unwrap();
    fd_gradient_check(|f, a| heat(&mesh, f, a, 4), &half_square(), &mesh);
}

#[test]
fn nonlinear_integrated_gradients_match_finite_differences() {
    let mesh = Mesh1D::unit(10).unwrap();
    let j = Functional::integrated((u_any().powi(3)).integrate()).unwrap();
    fd_gradient_check(|f, a| nonlinear(&mesh, f, a, 4), &j, &mesh);
}

#[test]
fn functional_reading_the_control_directly() {
    let mesh = Mesh1D::unit(8).unwrap();
    let tape = heat(&mesh, ic(&mesh), 0.4, 2);
    let a = CoefficientRef::param("a", Space::REAL).expr();
    let j = Functional::final_time((a.clone() * a * u_any()).integrate()).unwrap();
    let g = compute_gradient(&j, &amp_control(), &tape, &CheckpointPolicy::StoreAll).unwrap();
    let eps = 1e-6;
    let fd = (evaluate_functional(&j, &heat(&mesh, ic(&mesh), 0.4 + eps, 2)).unwrap()
        - evaluate_functional(&j, &heat(&mesh, ic(&mesh), 0.4 - eps, 2)).unwrap())
        / (2.0 * eps);
    assert!(rel(g.value.values[0], fd) < 1e-6);
    let d = FunctionValue::real(1.0);
    assert!(rel(tlm_derivative(&j, &amp_control(), &d, &tape).unwrap(), g.value.values[0]) < 1e-10);
}

#[test]
fn first_tangent_linear_value_is_the_direction() {
    let mesh = Mesh1D::unit(6).unwrap();
    let tape = heat(&mesh, ic(&mesh), 1.0, 2);
    let d = FunctionValue::new(Space::P1, random_direction(7, 1), &mesh).unwrap();
    let tlm = compute_tlm(&ic_control(), &d, &tape).unwrap();
    assert_eq!(tlm[0].1, d);
    assert_eq!(tlm.len(), 3);
}

#[test]
fn tangent_linear_state_matches_finite_differences() {
    let mesh = Mesh1D::unit(8).unwrap();
    let tape = heat(&mesh, ic(&mesh), 1.0, 3);
    let d = FunctionValue::new(Space::P1, random_direction(9, 5), &mesh).unwrap();
    let tlm = compute_tlm(&ic_control(), &d, &tape).unwrap();
    let h = 1e-7;
    let mut f = ic(&mesh);
    f.values.axpy(h, &d.values, 1.0);
    let perturbed = heat(&mesh, f, 1.0, 3);
    let last = tape.latest("u").unwrap();
    let fd = (&perturbed.value(&last).unwrap().values - &tape.value(&last).unwrap().values) / h;
    let du = &tlm.last().unwrap().1.values;
    assert!((du - &fd).norm() / du.norm() < 1e-6);
}

#[test]
fn checkpointed_gradient_is_bit_identical() {
    let mesh = Mesh1D::unit(8).unwrap();
    let tape = nonlinear(&mesh, ic(&mesh), 0.3, 9);
    let j = Functional::integrated((u_any() * u_any()).integrate()).unwrap();
    let reference = compute_gradient(&j, &ic_control(), &tape, &CheckpointPolicy::StoreAll).unwrap();
    for s in [1, 2, 3, 10] {
        let g = compute_gradient(&j, &ic_control(), &tape, &CheckpointPolicy::Offline { snapshots: s })
            .unwrap();
        assert_eq!(g.value, reference.value, "s={s}");
        assert_eq!(g.norms, reference.norms);
    }
}

#[test]
fn gradient_is_linear_in_the_functional_weights() {
    let mesh = Mesh1D::unit(8).unwrap();
    let tape = heat(&mesh, ic(&mesh), 1.0, 3);
    let x = FormExpr::x();
    let j1 = u_any() * u_any();
    let j2 = x * u_any() * u_any();
    let grad = |form: FormExpr| {
        compute_gradient(
            &Functional::final_time(form.integrate()).unwrap(),
            &ic_control(),
            &tape,
            &CheckpointPolicy::StoreAll,
        )
        .unwrap()
        .value
        .values
    };
    let combined = grad(2.0 * j1.clone() - 3.0 * j2.clone());
    let separate = 2.0 * grad(j1) - 3.0 * grad(j2);
    assert!((&combined - &separate).norm() <= 1e-12 * separate.norm());
}

#[test]
fn unknown_control_is_rejected() {
    let mesh = Mesh1D::unit(4).unwrap();
    let tape = heat(&mesh, ic(&mesh), 1.0, 1);
    let err = compute_gradient(
        &half_square(),
        &ControlParameter::Parameter("nope".into()),
        &tape,
        &CheckpointPolicy::StoreAll,
    )
    .unwrap_err();
    assert!(matches!(err, Error::ControlNotOnTape(_)));
    let err = compute_gradient(
        &half_square(),
        &ControlParameter::InitialCondition("w".into()),
        &tape,
        &CheckpointPolicy::StoreAll,
    )
    .unwrap_err();
    assert!(matches!(err, Error::ControlNotOnTape(_)));
}

#[test]
fn gradient_norms() {
    let mesh = Mesh1D::unit(8).unwrap();
    let mut tape = Tape::new(mesh, SolverConfig::default()).unwrap();
    tape.set_parameter("ic", FunctionValue::interpolate(&mesh, |_| 1.0))
        .unwrap();
    tape.annotate_assign_parameter("ic", "u", &Bindings::new())
        .unwrap();
    // The gradient is M·1, whose Riesz representative is 1 with unit L2 norm.
    let g = compute_gradient(&half_square(), &ic_control(), &tape, &CheckpointPolicy::StoreAll)
        .unwrap();
    assert!((g.mass_weighted_norm(&mesh).unwrap() - 1.0).abs() < 1e-13);
    let row_sums = hand_mass(&mesh) * DVector::from_element(9, 1.0);
    assert!((g.euclidean_norm() - row_sums.norm()).abs() < 1e-14);
}

#[test]
fn quadratic_central_remainder_vanishes() {
    let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
    let j = |m: &DVector<f64>| Ok(0.5 * m.dot(&(&a * m)) + m[0]);
    let m0 = DVector::from_vec(vec![0.3, -0.2]);
    let g = &a * &m0 + DVector::from_vec(vec![1.0, 0.0]);
    let d = random_direction(2, 42);
    let report = taylor_test(j, &m0, &g, &d, 0.1, 4, TaylorMode::Central).unwrap();
    for r in &report.remainder1 {
        assert!(*r < 1e-14);
    }
    let (o0, _) = report.finest_orders();
    assert!((o0.unwrap() - 1.0).abs() < 1e-10);
}

#[test]
fn taylor_orders_and_corruption() {
    let j = |m: &DVector<f64>| Ok(m.iter().map(|x| x.sin()).sum::<f64>() + m[0] * m[1]);
    let m0 = DVector::from_vec(vec![0.3, 1.1, -0.4]);
    let mut g = m0.map(f64::cos);
    g[0] += m0[1];
    g[1] += m0[0];
    let d = random_direction(3, 7);
    let one = taylor_test(j, &m0, &g, &d, 1e-2, 5, TaylorMode::OneSided).unwrap();
    let (o0, o1) = one.finest_orders();
    assert!((o0.unwrap() - 1.0).abs() < 0.05 && (o1.unwrap() - 2.0).abs() < 0.05);
    let central = taylor_test(j, &m0, &g, &d, 1e-2, 5, TaylorMode::Central).unwrap();
    assert!((central.finest_orders().1.unwrap() - 3.0).abs() < 0.1);

    let bad = &g * 1.001;
    let corrupt = taylor_test(j, &m0, &bad, &d, 1e-2, 5, TaylorMode::OneSided).unwrap();
    assert!(corrupt.finest_orders().1.unwrap() < 1.2);

    let csv = one.to_csv();
    assert!(csv.starts_with("h,remainder0,order0,remainder1,order1\n1.0000000000000000e-2,"));
    assert_eq!(csv.lines().count(), 6);
}

#[test]
fn taylor_rejects_non_finite_and_few_levels() {
    let m0 = DVector::from_element(1, 1.0);
    let g = m0.clone();
    assert!(taylor_test(|_| Ok(1.0), &m0, &g, &g, 0.1, 2, TaylorMode::OneSided).is_err());
    let err = taylor_test(|_| Ok(f64::NAN), &m0, &g, &g, 0.1, 3, TaylorMode::OneSided).unwrap_err();
    assert!(matches!(err, Error::NonFinite));
}

#[test]
fn direction_is_reproducible_and_in_unit_interval() {
    let a = random_direction(50, 9);
    assert_eq!(a, random_direction(50, 9));
    assert_ne!(a, random_direction(50, 10));
    assert!(a.iter().all(|&x| (0.0..1.0).contains(&x)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn adjoint_and_tangent_linear_agree(seed in 0u64..1000) {
        let mesh = Mesh1D::unit(6).unwrap();
        let tape = nonlinear(&mesh, ic(&mesh), 0.2, 3);
        let j = Functional::integrated((u_any() * u_any() * FormExpr::x()).integrate()).unwrap();
        let d = FunctionValue::new(Space::P1, random_direction(7, seed), &mesh).unwrap();
        let g = compute_gradient(&j, &ic_control(), &tape, &CheckpointPolicy::StoreAll).unwrap();
        let t = tlm_derivative(&j, &ic_control(), &d, &tape).unwrap();
        prop_assert!(rel(g.value.values.dot(&d.values), t) < 1e-10);
    }
}
