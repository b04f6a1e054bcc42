use memctl_core::controller::{baseline_law, LawConfig};
use memctl_core::dynamics::{rollout, FrictionParams, PlantParams, ReferenceSpec, RolloutConfig};
use memctl_core::incrt::{
    gate_update, growth_signal, phase2_range, prune_scores, run_phase1, simulate_operator,
    Decision, DirectionSet, GateState, Phase1Config, Phase1Protocol,
};
use memctl_core::linalg::{jacobi_eigen, leading_eigvec};
use memctl_core::memory_analysis::{
    build_residual_operator, history_gradient_fd_open_loop, GradientMode, TemporalResidualOperator,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

/// PSD operator `(1/N) Σ g gᵀ` from a few random directions with decaying weights.
fn psd_operator() -> impl Strategy<Value = TemporalResidualOperator> {
    (2usize..12, 1usize..40).prop_flat_map(|(w, n)| {
        proptest::collection::vec(proptest::collection::vec(-1.0..1.0f64, w), n).prop_map(
            move |rows| {
                let samples: Vec<DVector<f64>> = rows
                    .into_iter()
                    .enumerate()
                    .map(|(i, r)| DVector::from_vec(r) * (1.0 / (1.0 + i as f64)))
                    .collect();
                build_residual_operator(&samples, 1.0, GradientMode::Analytic).unwrap()
            },
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loop_invariants_hold(op in psd_operator()) {
        prop_assume!(op.matrix.norm() > 1e-8);
        let cfg = Phase1Config { window: op.window(), ..Default::default() };
        let res = run_phase1(&op, &cfg).unwrap();
        prop_assert!(res.k_star >= 1 && res.k_star <= op.window());
        prop_assert!(res.r_eff >= 1.0 - 1e-9 && res.r_eff <= op.window() as f64 + 1e-9);
        prop_assert_eq!(res.iterations, res.log.len());

        let mut k = 1usize;
        for entry in &res.log {
            prop_assert!(entry.k.abs_diff(k) <= 1);
            match entry.enacted {
                Decision::Grow => prop_assert_eq!(entry.k, k + 1),
                Decision::Prune => prop_assert_eq!(entry.k + 1, k),
                Decision::Hold => prop_assert_eq!(entry.k, k),
            }
            if entry.enacted != Decision::Hold {
                prop_assert_eq!(entry.enacted, entry.raw);
            }
            k = entry.k;
        }
        if res.converged {
            let tail = &res.log[res.log.len() - cfg.n_stable..];
            prop_assert!(tail.iter().all(|e| e.k == res.k_star));
        }

        // same operator and config, same log
        prop_assert_eq!(run_phase1(&op, &cfg).unwrap(), res);
    }

    #[test]
    fn deflation_keeps_residual_psd_and_shrinks_it(op in psd_operator()) {
        let scale = op.matrix.norm();
        prop_assume!(scale > 1e-8);
        let mut set = DirectionSet { directions: vec![], masses: vec![], residual: op.matrix.clone() };
        let mut prev = scale;
        for _ in 0..op.window() {
            if set.residual.norm() <= 1e-10 * scale {
                break;
            }
            let (u, _) = leading_eigvec(&set.residual).unwrap();
            prop_assert!((u.norm() - 1.0).abs() < 1e-10);
            set.push(u);
            let (vals, _) = jacobi_eigen(&set.residual).unwrap();
            prop_assert!(vals.min() >= -1e-8 * scale, "min eig {}", vals.min());
            let now = set.residual.norm();
            prop_assert!(now <= prev * (1.0 + 1e-12));
            prev = now;
        }
    }

    #[test]
    fn prune_scores_are_scale_invariant(op in psd_operator(), c in 0.01..100.0f64) {
        prop_assume!(op.matrix.norm() > 1e-8);
        let (u, _) = leading_eigvec(&op.matrix).unwrap();
        let a = prune_scores(std::slice::from_ref(&u), &op.matrix).unwrap();
        let b = prune_scores(std::slice::from_ref(&u), &(&op.matrix * c)).unwrap();
        prop_assert!((a[0] - b[0]).abs() <= 1e-12 * (1.0 + a[0].abs()));
    }
}

#[test]
fn reference_growth_and_prune_values() {
    let eye = DMatrix::<f64>::identity(4, 4);
    let e1 = DVector::from_fn(4, |i, _| if i == 0 { 1.0 } else { 0.0 });
    assert!((growth_signal(&eye, &e1) - 1.0).abs() < 1e-12);
    let v = DVector::from_vec(vec![2.0, -1.0, 0.5, 1.0]);
    assert!((growth_signal(&(&v * v.transpose()), &v.normalize()) - 1.0).abs() < 1e-12);
    let ortho = DVector::from_vec(vec![1.0, 2.0, 0.0, 0.0]).normalize();
    let r = DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, 0.0, 1.0, 2.0]));
    assert_eq!(growth_signal(&r, &ortho), 0.0);
    let scores = prune_scores(&[e1.clone(), v.normalize()], &DMatrix::identity(4, 4)).unwrap();
    assert!(scores.iter().all(|s| (s - 0.5).abs() < 1e-12));
}

#[test]
fn memoryless_gate_confirms_after_two_iterations() {
    let mut gate = GateState::new(1.0, 0.5);
    let mut enacted = Vec::new();
    for raw in [
        Decision::Grow,
        Decision::Grow,
        Decision::Grow,
        Decision::Prune,
        Decision::Prune,
        Decision::Hold,
    ] {
        let (d, g) = gate_update(raw, gate);
        gate = g;
        enacted.push(d);
    }
    use Decision::*;
    assert_eq!(enacted, [Hold, Grow, Grow, Hold, Prune, Hold]);
}

#[test]
fn linear_memory_gradients_give_a_single_head() {
    let (tau, w) = (2.0, 20);
    let fric = FrictionParams::default().with_tau_z(tau);
    let mut samples = Vec::new();
    for seed in 0..40 {
        let mut law = baseline_law(LawConfig::default());
        let traj = rollout(
            &mut law,
            &ReferenceSpec::default(),
            &PlantParams::default(),
            &fric,
            seed,
            &RolloutConfig::default(),
        )
        .unwrap();
        samples.push(
            history_gradient_fd_open_loop(&traj, 100 + 9 * seed as usize, 0, w, 1e-3, &fric)
                .unwrap(),
        );
    }
    let op = build_residual_operator(&samples, tau, GradientMode::OpenLoopFd).unwrap();
    let res = run_phase1(&op, &Phase1Config::default()).unwrap();
    assert_eq!(res.k_star, 1);
    assert!(res.converged);
    assert_eq!(phase2_range(res.k_star), 1..=1);
}

#[test]
fn simulated_operator_is_deterministic_and_psd() {
    let cfg = Phase1Config {
        n_samples: 48,
        ..Default::default()
    };
    let protocol = Phase1Protocol::default();
    let make = || {
        simulate_operator(
            1.0,
            &PlantParams::default(),
            &FrictionParams::default(),
            &cfg,
            &protocol,
            42,
        )
        .unwrap()
    };
    let (a, b) = (make(), make());
    assert_eq!(a, b);
    assert_eq!(a.n_samples, 48);
    assert_eq!(a.mode, GradientMode::ClosedLoopFd);
    let (vals, _) = jacobi_eigen(&a.matrix).unwrap();
    assert!(vals.min() >= -1e-10 * a.matrix.norm());
    assert!(a.matrix.trace() > 0.0);

    let res = run_phase1(&a, &cfg).unwrap();
    assert!(res.k_star >= 1 && res.k_star <= cfg.window);
    assert_eq!(run_phase1(&b, &cfg).unwrap(), res);
}

#[test]
fn head_count_ranges() {
    assert_eq!(phase2_range(14), 7..=14);
    assert_eq!(phase2_range(8), 4..=8);
    assert_eq!(phase2_range(9), 5..=9);
    assert_eq!(phase2_range(1), 1..=1);
}
