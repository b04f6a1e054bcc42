//! Helpers shared by the shield tests and the acceptance run.
#![allow(dead_code)]

use memctl_core::controller::{
    ControllerParams, ExtendedState, LawConfig, ParamBox, ParamVector, ParameterSource,
    PayloadModel, PARAM_DIM,
};
use memctl_core::dynamics::{
    rollout, FrictionParams, PlantParams, ReferenceSpec, RolloutConfig, StepContext, Trajectory,
};
use memctl_core::shield::{
    halfspace_coeffs, project_admissible, HalfspaceCoeffs, LyapunovForm, ShieldContext,
    ShieldedLaw, DEFAULT_ALPHA,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Random half-space that cuts through the default box.
pub fn cutting_halfspace(rng: &mut ChaCha8Rng, bounds: &ParamBox, dims: usize) -> HalfspaceCoeffs {
    let mut a = ParamVector::zeros();
    for i in 0..dims {
        a[i] = StandardNormal.sample(rng);
    }
    let lo: f64 = (0..PARAM_DIM)
        .map(|i| (a[i] * bounds.lower[i]).min(a[i] * bounds.upper[i]))
        .sum();
    let hi: f64 = (0..PARAM_DIM)
        .map(|i| (a[i] * bounds.lower[i]).max(a[i] * bounds.upper[i]))
        .sum();
    let rhs = lo + rng.random_range(0.05..0.95) * (hi - lo);
    let p = ControllerParams::from_vector(&a);
    HalfspaceCoeffs {
        a1: p.kd,
        a2: p.lambda,
        b: p.eta,
        a0: 0.0,
        b0: 0.0,
        c: rhs,
    }
}

pub fn random_point(rng: &mut ChaCha8Rng, bounds: &ParamBox, spread: f64) -> ParamVector {
    ParamVector::from_fn(|i, _| {
        let w = bounds.upper[i] - bounds.lower[i];
        rng.random_range(bounds.lower[i] - spread * w..=bounds.upper[i] + spread * w)
    })
}

pub fn feasible(coeffs: &HalfspaceCoeffs, bounds: &ParamBox, v: &ParamVector) -> bool {
    let slack = 1e-9 * (1.0 + coeffs.rhs().abs() + coeffs.normal().norm() * v.norm());
    bounds.contains_with_slack(v, 1e-9) && coeffs.normal().dot(v) <= coeffs.rhs() + slack
}

pub fn shielded_rollout_with<S: ParameterSource>(
    source: S,
    config: LawConfig,
    alpha: f64,
    plant: &PlantParams,
    tau: f64,
    seed: u64,
) -> Trajectory {
    let mut law = ShieldedLaw::new(source, config, ParamBox::default(), alpha);
    let fric = FrictionParams::default().with_tau_z(tau);
    rollout(
        &mut law,
        &ReferenceSpec::default(),
        plant,
        &fric,
        seed,
        &RolloutConfig::default(),
    )
    .unwrap()
}

/// Proposes the projection of a base point, perturbed by Gaussian noise of
/// scale `noise` (zero noise is feasible by construction). The law must use
/// the true payload so both sides see the same half-space.
pub struct ProjectedSource {
    pub base: ControllerParams,
    pub noise: f64,
    pub rng: ChaCha8Rng,
}

pub fn exact_model() -> LawConfig {
    LawConfig {
        payload_model: PayloadModel::True,
        ..Default::default()
    }
}

impl ParameterSource for ProjectedSource {
    fn propose(&mut self, ctx: &StepContext, _x: &ExtendedState) -> ControllerParams {
        let cfg = exact_model();
        let model = *ctx.plant;
        let sctx = ShieldContext {
            state: ctx.state,
            reference: ctx.reference,
            plant: ctx.plant,
            fric: ctx.fric,
            model: &model,
            basis: &cfg.basis,
        };
        let form = LyapunovForm::sliding(cfg.sliding_gain, DEFAULT_ALPHA);
        let coeffs = halfspace_coeffs(&sctx, &form);
        let p = project_admissible(&coeffs, &self.base, &ParamBox::default())
            .expect("non-empty admissible set")
            .params;
        let mut v = p.to_vector();
        if self.noise > 0.0 {
            for i in 0..PARAM_DIM {
                let n: f64 = StandardNormal.sample(&mut self.rng);
                v[i] += self.noise * n;
            }
        }
        ControllerParams::from_vector(&v)
    }
}
