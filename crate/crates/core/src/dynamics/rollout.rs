//! Closed-loop rollouts and trajectory records.

use std::io::Write;

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::integrator::{step_rk4, PlantState, DEFAULT_BLOWUP_BOUND};
use super::params::{FrictionParams, PlantParams};
use super::reference::{RefSample, Reference};
use crate::controller::ControllerParams;
use crate::error::{Error, Result};
use crate::shield::ShieldStep;

/// Everything a control law may look at on one step.
///
/// `plant` and `fric` are the true values; laws that should not know them
/// simply ignore them.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub t: f64,
    pub state: &'a PlantState,
    pub reference: &'a RefSample,
    pub plant: &'a PlantParams,
    pub fric: &'a FrictionParams,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlOutput {
    pub torque: Vector2<f64>,
    pub params: ControllerParams,
    pub shield: Option<ShieldStep>,
}

pub trait ControlLaw {
    /// Called once per rollout before the first step.
    fn reset(&mut self, plant: &PlantParams, rng: &mut ChaCha8Rng);
    fn control(&mut self, ctx: &StepContext) -> ControlOutput;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RolloutConfig {
    pub dt: f64,
    pub horizon: f64,
    pub blowup_bound: f64,
    /// Half-width of the uniform initial position offset, rad.
    pub reset_spread: f64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            dt: 0.01,
            horizon: 5.0,
            blowup_bound: DEFAULT_BLOWUP_BOUND,
            reset_spread: 0.1,
        }
    }
}

impl RolloutConfig {
    pub fn steps(&self) -> Result<usize> {
        if !(self.dt > 0.0 && self.horizon > 0.0) {
            return Err(Error::InvalidParameter(
                "dt and horizon must be positive".into(),
            ));
        }
        let n = self.horizon / self.dt;
        if (n - n.round()).abs() > 1e-9 * n.max(1.0) {
            return Err(Error::InvalidParameter(format!(
                "horizon {} is not an integer multiple of dt {}",
                self.horizon, self.dt
            )));
        }
        Ok(n.round() as usize)
    }
}

/// State at `t_k` and the torque held over `[t_k, t_k + dt)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: f64,
    pub state: PlantState,
    pub reference: RefSample,
    pub torque: Vector2<f64>,
    pub params: ControllerParams,
    pub shield: Option<ShieldStep>,
}

impl StepRecord {
    pub fn error(&self) -> Vector2<f64> {
        self.reference.q - self.state.q
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub seed: u64,
    pub dt: f64,
    pub records: Vec<StepRecord>,
    pub final_state: PlantState,
    pub diverged: bool,
}

impl Trajectory {
    /// Root-mean-square over time of the Euclidean joint error.
    pub fn rmse(&self) -> f64 {
        if self.records.is_empty() {
            return f64::NAN;
        }
        let sum: f64 = self.records.iter().map(|r| r.error().norm_squared()).sum();
        (sum / self.records.len() as f64).sqrt()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "t", "q1", "q2", "qd1", "qd2", "z1", "z2", "qd1_ref", "qd2_ref", "tau1", "tau2",
        ])?;
        for r in &self.records {
            let s = &r.state;
            let row = [
                r.t,
                s.q[0],
                s.q[1],
                s.qd[0],
                s.qd[1],
                s.z[0],
                s.z[1],
                r.reference.qd[0],
                r.reference.qd[1],
                r.torque[0],
                r.torque[1],
            ];
            w.write_record(row.iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Draw the initial state: position near the reference start, at rest, no memory.
pub fn reset_state(reference: &dyn Reference, spread: f64, rng: &mut ChaCha8Rng) -> PlantState {
    let r0 = reference.sample(0.0);
    let offset = if spread > 0.0 {
        Vector2::new(
            rng.random_range(-spread..=spread),
            rng.random_range(-spread..=spread),
        )
    } else {
        Vector2::zeros()
    };
    PlantState::at_rest(r0.q + offset)
}

/// Apply the law at `state` and integrate one step.
pub fn advance(
    law: &mut dyn ControlLaw,
    reference: &dyn Reference,
    plant: &PlantParams,
    fric: &FrictionParams,
    state: &PlantState,
    dt: f64,
) -> (StepRecord, PlantState) {
    let r = reference.sample(state.t);
    let ctx = StepContext {
        t: state.t,
        state,
        reference: &r,
        plant,
        fric,
    };
    let out = law.control(&ctx);
    let next = step_rk4(state, &out.torque, dt, plant, fric);
    let rec = StepRecord {
        t: state.t,
        state: *state,
        reference: r,
        torque: out.torque,
        params: out.params,
        shield: out.shield,
    };
    (rec, next)
}

/// Run `steps` control steps from `state` without resetting the law.
pub fn simulate_from(
    law: &mut dyn ControlLaw,
    reference: &dyn Reference,
    plant: &PlantParams,
    fric: &FrictionParams,
    state: PlantState,
    steps: usize,
    config: &RolloutConfig,
) -> (Vec<StepRecord>, PlantState, bool) {
    let mut records = Vec::with_capacity(steps);
    let mut s = state;
    for _ in 0..steps {
        let (rec, next) = advance(law, reference, plant, fric, &s, config.dt);
        let finite_torque = rec.torque.iter().all(|v| v.is_finite());
        records.push(rec);
        if !finite_torque || !next.within(config.blowup_bound) {
            return (records, next, true);
        }
        s = next;
    }
    (records, s, false)
}

/// Seeded closed-loop rollout from the reset distribution.
///
/// Divergence truncates the record and sets the flag rather than erroring.
pub fn rollout(
    law: &mut dyn ControlLaw,
    reference: &dyn Reference,
    plant: &PlantParams,
    fric: &FrictionParams,
    seed: u64,
    config: &RolloutConfig,
) -> Result<Trajectory> {
    plant.validate()?;
    fric.validate()?;
    let steps = config.steps()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s0 = reset_state(reference, config.reset_spread, &mut rng);
    law.reset(plant, &mut rng);
    let (records, final_state, diverged) =
        simulate_from(law, reference, plant, fric, s0, steps, config);
    Ok(Trajectory {
        seed,
        dt: config.dt,
        records,
        final_state,
        diverged,
    })
}
