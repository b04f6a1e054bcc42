//! Coupled fourth-order Runge-Kutta step for `(q, qd, z)`.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use super::friction::{memory_derivative, stribeck_force};
use super::model::{coriolis_matrix, gravity_vector, mass_matrix};
use super::params::{FrictionParams, PlantParams};
use crate::error::{Error, Result};

/// Any state entry larger than this in magnitude counts as a blow-up.
pub const DEFAULT_BLOWUP_BOUND: f64 = 1e3;

/// Full Markov state of the simulated arm, including the hidden memory `z`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    pub q: Vector2<f64>,
    pub qd: Vector2<f64>,
    pub z: Vector2<f64>,
    pub t: f64,
}

impl PlantState {
    pub fn at_rest(q: Vector2<f64>) -> Self {
        Self {
            q,
            qd: Vector2::zeros(),
            z: Vector2::zeros(),
            t: 0.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.q
            .iter()
            .chain(self.qd.iter())
            .chain(self.z.iter())
            .all(|v| v.is_finite())
            && self.t.is_finite()
    }

    /// True when every entry is finite and within `bound` in magnitude.
    pub fn within(&self, bound: f64) -> bool {
        self.q
            .iter()
            .chain(self.qd.iter())
            .chain(self.z.iter())
            .all(|v| v.is_finite() && v.abs() <= bound)
    }
}

/// Joint acceleration under torque `tau`.
pub fn acceleration(
    q: &Vector2<f64>,
    qd: &Vector2<f64>,
    z: &Vector2<f64>,
    tau: &Vector2<f64>,
    plant: &PlantParams,
    fric: &FrictionParams,
) -> Vector2<f64> {
    let m = mass_matrix(q, plant);
    let rhs = tau
        - coriolis_matrix(q, qd, plant) * qd
        - gravity_vector(q, plant)
        - stribeck_force(qd, z, fric);
    // M is SPD for valid parameters
    m.cholesky()
        .expect("mass matrix is positive definite")
        .solve(&rhs)
}

type Deriv = (Vector2<f64>, Vector2<f64>, Vector2<f64>);

fn derivative(
    q: &Vector2<f64>,
    qd: &Vector2<f64>,
    z: &Vector2<f64>,
    tau: &Vector2<f64>,
    plant: &PlantParams,
    fric: &FrictionParams,
) -> Deriv {
    (
        *qd,
        acceleration(q, qd, z, tau, plant, fric),
        memory_derivative(qd, z, fric),
    )
}

/// Advance the state by `dt` with `torque` held constant over the step.
pub fn step_rk4(
    state: &PlantState,
    torque: &Vector2<f64>,
    dt: f64,
    plant: &PlantParams,
    fric: &FrictionParams,
) -> PlantState {
    let (q, qd, z) = (state.q, state.qd, state.z);
    let h = dt / 2.0;
    let k1 = derivative(&q, &qd, &z, torque, plant, fric);
    let k2 = derivative(
        &(q + k1.0 * h),
        &(qd + k1.1 * h),
        &(z + k1.2 * h),
        torque,
        plant,
        fric,
    );
    let k3 = derivative(
        &(q + k2.0 * h),
        &(qd + k2.1 * h),
        &(z + k2.2 * h),
        torque,
        plant,
        fric,
    );
    let k4 = derivative(
        &(q + k3.0 * dt),
        &(qd + k3.1 * dt),
        &(z + k3.2 * dt),
        torque,
        plant,
        fric,
    );
    let w = dt / 6.0;
    PlantState {
        q: q + (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0) * w,
        qd: qd + (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1) * w,
        z: z + (k1.2 + 2.0 * k2.2 + 2.0 * k3.2 + k4.2) * w,
        t: state.t + dt,
    }
}

/// [`step_rk4`] with a blow-up check on the result.
pub fn step_rk4_bounded(
    state: &PlantState,
    torque: &Vector2<f64>,
    dt: f64,
    plant: &PlantParams,
    fric: &FrictionParams,
    bound: f64,
) -> Result<PlantState> {
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "dt must be positive, got {dt}"
        )));
    }
    let next = step_rk4(state, torque, dt, plant, fric);
    if next.within(bound) {
        Ok(next)
    } else {
        Err(Error::Diverged { t: next.t, bound })
    }
}
