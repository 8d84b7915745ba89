use super::*;
use crate::gradients::compute_adjoint;

fn small(kind: ModelKind) -> ModelConfig {
    ModelConfig {
        n_cells: 8,
        n_steps: 5,
        ..ModelConfig::new(kind)
    }
}

fn central_fd(model: &Model, kind: ControlKind, direction: &DVector<f64>) -> f64 {
    let base = model.default_controls();
    let m0 = Model::control_vector(&base, kind);
    let h = 1e-6;
    let plus = model.j_hat(&base, kind, &(&m0 + h * direction)).unwrap();
    let minus = model.j_hat(&base, kind, &(&m0 - h * direction)).unwrap();
    (plus - minus) / (2.0 * h)
}

#[test]
fn model_names_round_trip() {
    for kind in ModelKind::ALL {
        assert_eq!(kind.name().parse::<ModelKind>().unwrap(), kind);
    }
    assert!("wave".parse::<ModelKind>().is_err());
    assert_eq!("ic".parse::<ControlKind>().unwrap(), ControlKind::InitialCondition);
}

#[test]
fn annotation_does_not_change_values() {
    for kind in ModelKind::ALL {
        let model = Model::new(small(kind)).unwrap();
        let c = model.default_controls();
        let annotated = model.forward(&c, true).unwrap();
        let plain = model.forward(&c, false).unwrap();
        assert!(plain.equations().is_empty());
        assert_eq!(annotated.history(), plain.history(), "{kind}");
        for (id, _) in annotated.history() {
            assert_eq!(annotated.value(id).unwrap().values, plain.value(id).unwrap().values, "{kind} {id}");
        }
        let j = model.functional();
        assert_eq!(
            evaluate_functional(&j, &annotated).unwrap(),
            evaluate_functional(&j, &plain).unwrap()
        );
    }
}

#[test]
fn gradients_match_finite_differences() {
    for kind in ModelKind::ALL {
        let model = Model::new(small(kind)).unwrap();
        let tape = model.forward(&model.default_controls(), true).unwrap();
        for ck in [ControlKind::InitialCondition, ControlKind::Scalar] {
            let g = compute_gradient(&model.functional(), &model.control(ck), &tape, &CheckpointPolicy::StoreAll)
                .unwrap();
            let d = random_direction(g.value.len(), 3);
            let adjoint = g.value.values.dot(&d);
            let fd = central_fd(&model, ck, &d);
            assert!(
                (adjoint - fd).abs() <= 1e-6 * fd.abs().max(1e-3),
                "{kind} {ck:?}: adjoint {adjoint} fd {fd}"
            );
        }
    }
}

#[test]
fn zero_data_gives_zero_state_and_gradient() {
    for kind in [ModelKind::BurgersLinearised, ModelKind::BurgersImplicit, ModelKind::Heat] {
        let model = Model::new(ModelConfig {
            n_steps: 1,
            forcing: 0.0,
            ..small(kind)
        })
        .unwrap();
        let controls = Controls {
            initial_condition: FunctionValue::zeros(Space::P1, model.mesh()),
            scalar: 0.0,
        };
        let tape = model.forward(&controls, true).unwrap();
        let u1 = Model::final_state(&tape).unwrap();
        assert_eq!(u1.values.amax(), 0.0, "{kind}");
        let g = compute_gradient(
            &model.functional(),
            &model.control(ControlKind::InitialCondition),
            &tape,
            &CheckpointPolicy::StoreAll,
        )
        .unwrap();
        assert_eq!(g.value.values.amax(), 0.0, "{kind}");
    }
}

#[test]
fn strong_viscosity_decays_monotonically() {
    for kind in [ModelKind::BurgersImplicit, ModelKind::Heat] {
        let mut previous = f64::INFINITY;
        for steps in 1..=6 {
            let model = Model::new(ModelConfig {
                nu: 1.0,
                forcing: 0.0,
                n_steps: steps,
                ..small(kind)
            })
            .unwrap();
            let j = model
                .j_hat(
                    &model.default_controls(),
                    ControlKind::Scalar,
                    &DVector::from_element(1, 0.0),
                )
                .unwrap();
            assert!(j < previous, "{kind}: J({steps}) = {j} not below {previous}");
            previous = j;
        }
    }
}

#[test]
fn heat_reuses_one_operator() {
    let model = Model::new(small(ModelKind::Heat)).unwrap();
    let out = model.run(ControlKind::InitialCondition).unwrap();
    assert_eq!(out.report.total.operator_assemblies, 1);
    assert_eq!(out.report.total.factorizations, 2);
    assert_eq!(out.report.total.adjoint_solves, out.report.tape_equations);
}

#[test]
fn heat_adjoint_is_a_forward_run_from_the_final_state() {
    // With a symmetric step operator and J = ½∫u_N², the adjoint of step
    // N - k is the state after k + 1 unforced steps from u_N.
    let cfg = ModelConfig {
        forcing: 0.0,
        ..small(ModelKind::Heat)
    };
    let model = Model::new(cfg.clone()).unwrap();
    let tape = model.forward(&model.default_controls(), true).unwrap();
    let u_n = Model::final_state(&tape).unwrap();
    let adjoint = compute_adjoint(&model.functional(), &tape, &CheckpointPolicy::StoreAll).unwrap();
    let replay = model
        .forward(
            &Controls {
                initial_condition: u_n,
                scalar: 0.0,
            },
            true,
        )
        .unwrap();
    let forward_states: Vec<_> = replay.history()[1..]
        .iter()
        .map(|(id, _)| replay.value(id).unwrap().values.clone())
        .collect();
    for (k, (_, z)) in adjoint.adjoints[..cfg.n_steps].iter().enumerate() {
        let diff = (&z.values - &forward_states[k]).amax();
        assert!(diff < 1e-13, "step {k}: {diff}");
    }
}

#[test]
fn implicit_burgers_costs() {
    let model = Model::new(small(ModelKind::BurgersImplicit)).unwrap();
    let out = model.run(ControlKind::InitialCondition).unwrap();
    let r = &out.report;
    assert_eq!(r.total.adjoint_linear_solves, r.timesteps);
    assert!(r.forward.newton_iterations >= 2 * r.timesteps);
    assert!(r.cost_ratio() <= 1.5);
    assert_eq!(r.total.adjoint_solves, r.tape_equations);
}

#[test]
fn matrix_free_is_rejected_for_nonsymmetric_newton() {
    let cfg = ModelConfig {
        mode: SolveMode::MatrixFree,
        ..small(ModelKind::BurgersImplicit)
    };
    assert!(matches!(Model::new(cfg), Err(Error::InvalidConfig(_))));
}

#[test]
fn explicit_scheme_warns_on_fine_meshes() {
    let cfg = ModelConfig {
        n_cells: 64,
        ..ModelConfig::new(ModelKind::BurgersLinearised)
    };
    assert!(!cfg.validate().unwrap().is_empty());
    assert!(ModelConfig::new(ModelKind::BurgersLinearised)
        .validate()
        .unwrap()
        .is_empty());
}

#[test]
fn invalid_configs_are_rejected() {
    let base = small(ModelKind::Heat);
    for bad in [
        ModelConfig { n_cells: 1, ..base.clone() },
        ModelConfig { dt: 0.0, ..base.clone() },
        ModelConfig { n_steps: 0, ..base.clone() },
        ModelConfig { nu: -1.0, ..base.clone() },
        ModelConfig {
            policy: CheckpointPolicy::Offline { snapshots: 0 },
            ..base.clone()
        },
    ] {
        assert!(Model::new(bad).is_err());
    }
}

#[test]
fn offline_run_recomputes_as_planned() {
    let model = Model::new(ModelConfig {
        n_steps: 10,
        policy: CheckpointPolicy::Offline { snapshots: 3 },
        ..small(ModelKind::ReactionDiffusion)
    })
    .unwrap();
    let out = model.run(ControlKind::InitialCondition).unwrap();
    assert_eq!(out.report.checkpoint.recomputed_steps, out.report.predicted_recomputation);
    assert!(out.report.checkpoint.max_live_snapshots <= 3);
    let j = model
        .j_hat(
            &model.default_controls(),
            ControlKind::Scalar,
            &DVector::from_element(1, model.config().reaction),
        )
        .unwrap();
    assert_eq!(j, out.report.functional);
}
