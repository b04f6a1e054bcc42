//! Mass, Coriolis and gravity terms of the two-link arm.

use nalgebra::{Matrix2, Vector2};

use super::params::PlantParams;

pub fn mass_matrix(q: &Vector2<f64>, params: &PlantParams) -> Matrix2<f64> {
    let (a1, a2, a3) = params.inertia_coeffs();
    let c2 = q[1].cos();
    let jm = params.rotor_inertia;
    let m12 = a3 + a2 * c2;
    Matrix2::new(a1 + 2.0 * a2 * c2 + jm, m12, m12, a3 + jm)
}

/// Christoffel-form Coriolis matrix, so that `dM/dt - 2C` is skew-symmetric.
pub fn coriolis_matrix(q: &Vector2<f64>, qd: &Vector2<f64>, params: &PlantParams) -> Matrix2<f64> {
    let (_, a2, _) = params.inertia_coeffs();
    let h = -a2 * q[1].sin();
    Matrix2::new(h * qd[1], h * (qd[0] + qd[1]), -h * qd[0], 0.0)
}

pub fn gravity_vector(q: &Vector2<f64>, params: &PlantParams) -> Vector2<f64> {
    let (g1, g2) = params.gravity_coeffs();
    let c12 = (q[0] + q[1]).cos();
    Vector2::new(g1 * q[0].cos() + g2 * c12, g2 * c12)
}

pub fn potential_energy(q: &Vector2<f64>, params: &PlantParams) -> f64 {
    let (g1, g2) = params.gravity_coeffs();
    g1 * q[0].sin() + g2 * (q[0] + q[1]).sin()
}

pub fn kinetic_energy(q: &Vector2<f64>, qd: &Vector2<f64>, params: &PlantParams) -> f64 {
    0.5 * qd.dot(&(mass_matrix(q, params) * qd))
}

/// Time derivative of the mass matrix along `qd`.
pub fn mass_matrix_dot(q: &Vector2<f64>, qd: &Vector2<f64>, params: &PlantParams) -> Matrix2<f64> {
    let (_, a2, _) = params.inertia_coeffs();
    let d = -a2 * q[1].sin() * qd[1];
    Matrix2::new(2.0 * d, d, d, 0.0)
}

/// Configuration where the potential energy is minimal: both links hanging down.
pub fn hanging_configuration() -> Vector2<f64> {
    Vector2::new(-std::f64::consts::FRAC_PI_2, 0.0)
}
