use memctl_core::controller::{
    baseline_law, computed_torque, control_torque, fixed_gain_baseline, squash, ControllerParams,
    ExtendedState, FeatureBasis, LawConfig, ParamBox, ParamVector, PARAM_DIM,
};
use memctl_core::dynamics::{
    rollout, FrictionParams, PlantParams, PlantState, RefSample, ReferenceSpec, RolloutConfig,
};
use nalgebra::{Vector2, Vector6};
use proptest::prelude::*;

fn param_vector() -> impl Strategy<Value = ParamVector> {
    proptest::collection::vec(-40.0..40.0f64, PARAM_DIM)
        .prop_map(|v| ParamVector::from_column_slice(&v))
}

fn vec2() -> impl Strategy<Value = Vector2<f64>> {
    (-2.0..2.0f64, -2.0..2.0f64).prop_map(|(a, b)| Vector2::new(a, b))
}

fn operating_point() -> impl Strategy<Value = (PlantState, RefSample)> {
    (vec2(), vec2(), vec2(), vec2(), vec2()).prop_map(|(q, qd, rq, rqd, rqdd)| {
        (
            PlantState {
                qd,
                ..PlantState::at_rest(q)
            },
            RefSample {
                q: rq,
                qd: rqd,
                qdd: rqdd,
            },
        )
    })
}

proptest! {
    #[test]
    fn squash_lands_in_box(raw in param_vector()) {
        let b = ParamBox::default();
        prop_assert!(b.contains(&squash(&raw, &b).to_vector()));
    }

    #[test]
    fn squash_is_monotone(raw in param_vector(), i in 0..PARAM_DIM, step in 0.0..5.0f64) {
        let b = ParamBox::default();
        let mut up = raw;
        up[i] += step;
        let (lo, hi) = (squash(&raw, &b).to_vector(), squash(&up, &b).to_vector());
        prop_assert!(hi[i] >= lo[i]);
        for j in (0..PARAM_DIM).filter(|&j| j != i) {
            prop_assert_eq!(hi[j], lo[j]);
        }
    }

    // torque(θ_a + t(θ_b − θ_a)) is affine in t when only (K_d, η) move
    #[test]
    fn torque_is_affine_in_kd_and_eta(
        (state, r) in operating_point(),
        kd_a in vec2(), kd_b in vec2(),
        eta_a in proptest::collection::vec(-2.0..2.0f64, 6),
        eta_b in proptest::collection::vec(-2.0..2.0f64, 6),
        t in -1.0..2.0f64,
    ) {
        let model = PlantParams::default();
        let basis = FeatureBasis::default();
        let x = ExtendedState::new(&state, &r, &Vector2::repeat(5.0));
        let lambda = Vector2::new(4.0, 6.0);
        let a = ControllerParams { kd: kd_a * 30.0, lambda, eta: Vector6::from_column_slice(&eta_a) };
        let b = ControllerParams { kd: kd_b * 30.0, lambda, eta: Vector6::from_column_slice(&eta_b) };
        let mix = ControllerParams { kd: a.kd + (b.kd - a.kd) * t, lambda, eta: a.eta + (b.eta - a.eta) * t };
        let ta = control_torque(&x, &r, &a, &model, &basis);
        let tb = control_torque(&x, &r, &b, &model, &basis);
        let tm = control_torque(&x, &r, &mix, &model, &basis);
        let expected = ta + (tb - ta) * t;
        prop_assert!((tm - expected).amax() <= 1e-9 * (1.0 + expected.amax()));
    }
}

#[test]
fn feedforward_superposes_across_weight_vectors() {
    let basis = FeatureBasis::default();
    let state = PlantState {
        qd: Vector2::new(0.05, -0.3),
        ..PlantState::at_rest(Vector2::new(0.2, 0.1))
    };
    let r = RefSample {
        q: Vector2::new(0.25, 0.0),
        qd: Vector2::new(0.1, -0.2),
        qdd: Vector2::new(0.0, 0.4),
    };
    let x = ExtendedState::new(&state, &r, &Vector2::repeat(5.0));
    let model = PlantParams::default();
    let base = fixed_gain_baseline();
    let with = |eta: Vector6<f64>| {
        control_torque(&x, &r, &ControllerParams { eta, ..base }, &model, &basis)
    };
    let e1 = Vector6::new(0.3, -0.1, 0.2, 0.0, 0.5, -0.4);
    let e2 = Vector6::new(-0.2, 0.4, 0.0, 0.1, -0.3, 0.2);
    let lhs = with(e1 + e2) - with(Vector6::zeros());
    let rhs = (with(e1) - with(Vector6::zeros())) + (with(e2) - with(Vector6::zeros()));
    assert!((lhs - rhs).amax() < 1e-12);
    assert_eq!(
        with(Vector6::zeros()),
        computed_torque(&x, &r, &base, &model)
    );
}

#[test]
fn baseline_fits_default_box_with_margin() {
    let b = ParamBox::default();
    let v = fixed_gain_baseline().to_vector();
    assert!(b.contains(&v));
    for i in 0..4 {
        assert!(v[i] > b.lower[i] && v[i] < b.upper[i]);
    }
}

#[test]
fn baseline_error_grows_with_payload() {
    // nominal payload model: the controller ignores the extra mass
    let fric = FrictionParams::default();
    let cfg = RolloutConfig::default();
    let mean_rmse = |p: f64| {
        let plant = PlantParams::default().with_payload(p);
        (0..4)
            .map(|seed| {
                let mut law = baseline_law(LawConfig::default());
                rollout(
                    &mut law,
                    &ReferenceSpec::default(),
                    &plant,
                    &fric,
                    seed,
                    &cfg,
                )
                .unwrap()
                .rmse()
            })
            .sum::<f64>()
            / 4.0
    };
    let rmse: Vec<f64> = [0.0, 0.5, 1.0, 1.5].iter().map(|&p| mean_rmse(p)).collect();
    assert!(rmse.windows(2).all(|w| w[1] > w[0]), "{rmse:?}");
}
