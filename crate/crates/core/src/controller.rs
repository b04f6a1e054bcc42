//! Parameterised computed-torque law, squashing into the parameter box,
//! and the fixed-gain baseline.

use nalgebra::{Matrix2x6, SVector, Vector2, Vector6};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    coriolis_matrix, gravity_vector, mass_matrix, ControlLaw, ControlOutput, PlantParams,
    PlantState, RefSample, StepContext, PAYLOAD_MAX,
};
use crate::error::{Error, Result};

/// Number of scalar controller parameters: 2 gains, 2 sliding gains, 6 weights.
pub const PARAM_DIM: usize = 10;
pub type ParamVector = SVector<f64, PARAM_DIM>;

/// Nominal sliding-surface gain used to form `s` in the extended state.
pub const NOMINAL_SLIDING_GAIN: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerParams {
    pub kd: Vector2<f64>,
    pub lambda: Vector2<f64>,
    pub eta: Vector6<f64>,
}

impl ControllerParams {
    /// Flatten as `[kd, lambda, eta]`.
    pub fn to_vector(&self) -> ParamVector {
        let mut v = ParamVector::zeros();
        v.fixed_rows_mut::<2>(0).copy_from(&self.kd);
        v.fixed_rows_mut::<2>(2).copy_from(&self.lambda);
        v.fixed_rows_mut::<6>(4).copy_from(&self.eta);
        v
    }

    pub fn from_vector(v: &ParamVector) -> Self {
        Self {
            kd: v.fixed_rows::<2>(0).into_owned(),
            lambda: v.fixed_rows::<2>(2).into_owned(),
            eta: v.fixed_rows::<6>(4).into_owned(),
        }
    }
}

pub fn fixed_gain_baseline() -> ControllerParams {
    ControllerParams {
        kd: Vector2::repeat(30.0),
        lambda: Vector2::repeat(NOMINAL_SLIDING_GAIN),
        eta: Vector6::zeros(),
    }
}

/// Compact box of admissible controller parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ParamBox {
    pub lower: ParamVector,
    pub upper: ParamVector,
}

impl Default for ParamBox {
    fn default() -> Self {
        Self::uniform((0.0, 60.0), (0.0, 12.0), 2.0)
    }
}

impl ParamBox {
    pub fn uniform(kd: (f64, f64), lambda: (f64, f64), eta_max: f64) -> Self {
        let lo = ControllerParams {
            kd: Vector2::repeat(kd.0),
            lambda: Vector2::repeat(lambda.0),
            eta: Vector6::repeat(-eta_max),
        };
        let hi = ControllerParams {
            kd: Vector2::repeat(kd.1),
            lambda: Vector2::repeat(lambda.1),
            eta: Vector6::repeat(eta_max),
        };
        Self {
            lower: lo.to_vector(),
            upper: hi.to_vector(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self
            .lower
            .iter()
            .zip(self.upper.iter())
            .all(|(l, u)| l < u && l.is_finite() && u.is_finite())
        {
            Ok(())
        } else {
            Err(Error::InvalidParameter(
                "box lower bounds must be below upper bounds".into(),
            ))
        }
    }

    pub fn contains(&self, v: &ParamVector) -> bool {
        self.contains_with_slack(v, 0.0)
    }

    pub fn contains_with_slack(&self, v: &ParamVector, slack: f64) -> bool {
        (0..PARAM_DIM).all(|i| v[i] >= self.lower[i] - slack && v[i] <= self.upper[i] + slack)
    }

    pub fn clip(&self, v: &ParamVector) -> ParamVector {
        ParamVector::from_fn(|i, _| v[i].clamp(self.lower[i], self.upper[i]))
    }

    pub fn midpoint(&self) -> ParamVector {
        (self.lower + self.upper) / 2.0
    }
}

/// Map an unbounded action into the box: logistic for gains, tanh for weights.
pub fn squash(raw: &ParamVector, bounds: &ParamBox) -> ControllerParams {
    let v = ParamVector::from_fn(|i, _| {
        let (lo, hi) = (bounds.lower[i], bounds.upper[i]);
        if i < 4 {
            lo + (hi - lo) * logistic(raw[i])
        } else {
            0.5 * (lo + hi) + 0.5 * (hi - lo) * raw[i].tanh()
        }
    });
    ControllerParams::from_vector(&v)
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Tracking errors and sliding variable at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtendedState {
    pub q: Vector2<f64>,
    pub qd: Vector2<f64>,
    pub e: Vector2<f64>,
    pub ed: Vector2<f64>,
    pub s: Vector2<f64>,
}

impl ExtendedState {
    /// `s` is formed with the fixed `sliding_gain`, so the law stays affine in
    /// the scheduled parameters.
    pub fn new(state: &PlantState, r: &RefSample, sliding_gain: &Vector2<f64>) -> Self {
        let e = r.q - state.q;
        let ed = r.qd - state.qd;
        Self {
            q: state.q,
            qd: state.qd,
            e,
            ed,
            s: ed + sliding_gain.component_mul(&e),
        }
    }
}

/// Friction-shaped features for the affine feed-forward term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureBasis {
    /// Width of the smoothed sign, rad/s.
    pub sign_width: f64,
    pub stribeck_velocity: f64,
}

impl Default for FeatureBasis {
    fn default() -> Self {
        Self {
            sign_width: 0.01,
            stribeck_velocity: 0.1,
        }
    }
}

impl FeatureBasis {
    /// Feature matrix; joint `j` owns columns `3j..3j+3`.
    pub fn features(&self, qd: &Vector2<f64>) -> Matrix2x6<f64> {
        let mut phi = Matrix2x6::zeros();
        for j in 0..2 {
            let sg = (qd[j] / self.sign_width).tanh();
            let r = qd[j] / self.stribeck_velocity;
            phi[(j, 3 * j)] = sg;
            phi[(j, 3 * j + 1)] = qd[j];
            phi[(j, 3 * j + 2)] = (-r * r).exp() * sg;
        }
        phi
    }
}

pub fn feedforward(qd: &Vector2<f64>, eta: &Vector6<f64>, basis: &FeatureBasis) -> Vector2<f64> {
    basis.features(qd) * eta
}

/// Slotine-Li computed torque without the feed-forward term.
pub fn computed_torque(
    x: &ExtendedState,
    r: &RefSample,
    gains: &ControllerParams,
    model: &PlantParams,
) -> Vector2<f64> {
    let qd_r = r.qd + gains.lambda.component_mul(&x.e);
    let qdd_r = r.qdd + gains.lambda.component_mul(&x.ed);
    mass_matrix(&x.q, model) * qdd_r
        + coriolis_matrix(&x.q, &x.qd, model) * qd_r
        + gravity_vector(&x.q, model)
        + gains.kd.component_mul(&x.s)
}

/// Full commanded torque: computed torque plus feed-forward.
pub fn control_torque(
    x: &ExtendedState,
    r: &RefSample,
    gains: &ControllerParams,
    model: &PlantParams,
    basis: &FeatureBasis,
) -> Vector2<f64> {
    computed_torque(x, r, gains, model) + feedforward(&x.qd, &gains.eta, basis)
}

/// Payload value the controller believes in.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PayloadModel {
    True,
    /// Multiplicative Gaussian error with the given relative sd.
    Noisy {
        rel_sd: f64,
    },
    #[default]
    Nominal,
}

impl PayloadModel {
    pub fn estimate(&self, true_payload: f64, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            PayloadModel::True => true_payload,
            PayloadModel::Nominal => 0.0,
            PayloadModel::Noisy { rel_sd } => {
                let n = Normal::new(1.0, rel_sd.max(0.0)).expect("finite sd");
                (true_payload * n.sample(rng)).clamp(0.0, PAYLOAD_MAX)
            }
        }
    }
}

/// Supplies controller parameters at each control step.
pub trait ParameterSource: Send {
    fn propose(&mut self, ctx: &StepContext, x: &ExtendedState) -> ControllerParams;
    fn reset(&mut self, _rng: &mut ChaCha8Rng) {}
}

/// Constant parameters.
#[derive(Debug, Clone, Copy)]
pub struct FixedSource(pub ControllerParams);

impl ParameterSource for FixedSource {
    fn propose(&mut self, _ctx: &StepContext, _x: &ExtendedState) -> ControllerParams {
        self.0
    }
}

/// Parameters drawn uniformly from a box at every step.
#[derive(Debug, Clone)]
pub struct RandomSource {
    pub bounds: ParamBox,
    rng: ChaCha8Rng,
}

impl RandomSource {
    pub fn new(bounds: ParamBox, rng: ChaCha8Rng) -> Self {
        Self { bounds, rng }
    }
}

impl ParameterSource for RandomSource {
    fn propose(&mut self, _ctx: &StepContext, _x: &ExtendedState) -> ControllerParams {
        let v = ParamVector::from_fn(|i, _| {
            self.rng
                .random_range(self.bounds.lower[i]..=self.bounds.upper[i])
        });
        ControllerParams::from_vector(&v)
    }
}

/// Settings shared by the shielded and unshielded laws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LawConfig {
    pub basis: FeatureBasis,
    pub payload_model: PayloadModel,
    pub sliding_gain: f64,
}

impl Default for LawConfig {
    fn default() -> Self {
        Self {
            basis: FeatureBasis::default(),
            payload_model: PayloadModel::default(),
            sliding_gain: NOMINAL_SLIDING_GAIN,
        }
    }
}

/// Unshielded computed-torque law driven by a parameter source.
pub struct ComputedTorqueLaw<S> {
    pub source: S,
    pub config: LawConfig,
    model: PlantParams,
}

impl<S: ParameterSource> ComputedTorqueLaw<S> {
    pub fn new(source: S, config: LawConfig) -> Self {
        Self {
            source,
            config,
            model: PlantParams::default(),
        }
    }

    /// Plant model used for the last reset.
    pub fn model(&self) -> &PlantParams {
        &self.model
    }
}

impl<S: ParameterSource> ControlLaw for ComputedTorqueLaw<S> {
    fn reset(&mut self, plant: &PlantParams, rng: &mut ChaCha8Rng) {
        self.model = plant.with_payload(self.config.payload_model.estimate(plant.payload, rng));
        self.source.reset(rng);
    }

    fn control(&mut self, ctx: &StepContext) -> ControlOutput {
        let x = ExtendedState::new(
            ctx.state,
            ctx.reference,
            &Vector2::repeat(self.config.sliding_gain),
        );
        let params = self.source.propose(ctx, &x);
        let torque = control_torque(&x, ctx.reference, &params, &self.model, &self.config.basis);
        ControlOutput {
            torque,
            params,
            shield: None,
        }
    }
}

/// Convenience constructor for the fixed-gain baseline law.
pub fn baseline_law(config: LawConfig) -> ComputedTorqueLaw<FixedSource> {
    ComputedTorqueLaw::new(FixedSource(fixed_gain_baseline()), config)
}
