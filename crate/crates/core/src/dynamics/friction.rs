//! Stribeck friction with an internal memory state.

use nalgebra::Vector2;

use super::params::FrictionParams;

/// Sign with `sign(0) = 0`, so the force at rest is single-valued.
pub fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Friction torque for one joint.
pub fn stribeck_scalar(qd: f64, z: f64, fric: &FrictionParams) -> f64 {
    let r = qd / fric.stribeck_velocity;
    let level = fric.coulomb + (fric.static_peak - fric.coulomb) * (-r * r).exp();
    level * sign0(qd) + fric.viscous * qd + z
}

pub fn stribeck_force(qd: &Vector2<f64>, z: &Vector2<f64>, fric: &FrictionParams) -> Vector2<f64> {
    Vector2::new(
        stribeck_scalar(qd[0], z[0], fric),
        stribeck_scalar(qd[1], z[1], fric),
    )
}

pub fn memory_derivative(
    qd: &Vector2<f64>,
    z: &Vector2<f64>,
    fric: &FrictionParams,
) -> Vector2<f64> {
    -z / fric.tau_z + qd * fric.memory_gain
}

/// One RK4 step of the memory alone under a velocity held constant over the step.
pub fn memory_step_rk4(
    z: &Vector2<f64>,
    qd: &Vector2<f64>,
    dt: f64,
    fric: &FrictionParams,
) -> Vector2<f64> {
    let k1 = memory_derivative(qd, z, fric);
    let k2 = memory_derivative(qd, &(z + k1 * (dt / 2.0)), fric);
    let k3 = memory_derivative(qd, &(z + k2 * (dt / 2.0)), fric);
    let k4 = memory_derivative(qd, &(z + k3 * dt), fric);
    z + (k1 + 2.0 * k2 + 2.0 * k3 + k4) * (dt / 6.0)
}
