use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper end of the payload interval, kg.
pub const PAYLOAD_MAX: f64 = 1.5;

/// Rigid-body parameters of the two-link arm.
///
/// Joint 1 is measured from the horizontal, gravity acts along `-y`, and the
/// payload is a point mass at the end-effector. `rotor_inertia` is the
/// reflected actuator inertia added to each diagonal entry of the mass matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantParams {
    pub m1: f64,
    pub m2: f64,
    pub l1: f64,
    pub l2: f64,
    pub lc1: f64,
    pub lc2: f64,
    pub i1: f64,
    pub i2: f64,
    pub g: f64,
    pub payload: f64,
    pub rotor_inertia: f64,
}

impl Default for PlantParams {
    fn default() -> Self {
        let (m, l) = (1.0, 0.5);
        Self {
            m1: m,
            m2: m,
            l1: l,
            l2: l,
            lc1: l / 2.0,
            lc2: l / 2.0,
            i1: m * l * l / 12.0,
            i2: m * l * l / 12.0,
            g: 9.81,
            payload: 0.0,
            rotor_inertia: 1.0,
        }
    }
}

impl PlantParams {
    pub fn with_payload(mut self, payload: f64) -> Self {
        self.payload = payload;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("m1", self.m1),
            ("m2", self.m2),
            ("l1", self.l1),
            ("l2", self.l2),
            ("i1", self.i1),
            ("i2", self.i2),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if !(self.lc1 >= 0.0 && self.lc2 >= 0.0) {
            return Err(Error::InvalidParameter(
                "centre-of-mass offsets must be non-negative".into(),
            ));
        }
        if !(self.g >= 0.0 && self.rotor_inertia >= 0.0) {
            return Err(Error::InvalidParameter(
                "g and rotor_inertia must be non-negative".into(),
            ));
        }
        if !(0.0..=PAYLOAD_MAX).contains(&self.payload) {
            return Err(Error::InvalidParameter(format!(
                "payload {} outside [0, {PAYLOAD_MAX}]",
                self.payload
            )));
        }
        Ok(())
    }

    /// Inertial coefficients `(a1, a2, a3)` of the standard two-link form.
    pub(crate) fn inertia_coeffs(&self) -> (f64, f64, f64) {
        let p = self.payload;
        let a1 = self.i1
            + self.m1 * self.lc1 * self.lc1
            + self.i2
            + self.m2 * (self.l1 * self.l1 + self.lc2 * self.lc2)
            + p * (self.l1 * self.l1 + self.l2 * self.l2);
        let a2 = self.m2 * self.l1 * self.lc2 + p * self.l1 * self.l2;
        let a3 = self.i2 + self.m2 * self.lc2 * self.lc2 + p * self.l2 * self.l2;
        (a1, a2, a3)
    }

    /// Gravity moment arms `(g1, g2)` multiplying `cos q1` and `cos(q1 + q2)`.
    pub(crate) fn gravity_coeffs(&self) -> (f64, f64) {
        let p = self.payload;
        let g1 = (self.m1 * self.lc1 + (self.m2 + p) * self.l1) * self.g;
        let g2 = (self.m2 * self.lc2 + p * self.l2) * self.g;
        (g1, g2)
    }
}

/// Stribeck friction with a first-order memory state per joint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrictionParams {
    /// Coulomb level `F_c`, N·m.
    pub coulomb: f64,
    /// Static peak `F_smax`, N·m.
    pub static_peak: f64,
    /// Stribeck velocity `v_s`, rad/s.
    pub stribeck_velocity: f64,
    /// Viscous coefficient, N·m·s/rad.
    pub viscous: f64,
    /// Memory drive gain `lambda_z`.
    pub memory_gain: f64,
    /// Memory decay time constant, s.
    pub tau_z: f64,
}

impl Default for FrictionParams {
    fn default() -> Self {
        Self {
            coulomb: 0.5,
            static_peak: 1.0,
            stribeck_velocity: 0.1,
            viscous: 0.2,
            memory_gain: 1.0,
            tau_z: 1.0,
        }
    }
}

impl FrictionParams {
    pub fn with_tau_z(mut self, tau_z: f64) -> Self {
        self.tau_z = tau_z;
        self
    }

    /// Memory horizon; equals the decay constant for this model.
    pub fn memory_horizon(&self) -> f64 {
        self.tau_z
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.coulomb >= 0.0 && self.static_peak >= self.coulomb) {
            return Err(Error::InvalidParameter(format!(
                "need static_peak >= coulomb >= 0, got {} / {}",
                self.static_peak, self.coulomb
            )));
        }
        if !(self.stribeck_velocity > 0.0) {
            return Err(Error::InvalidParameter(
                "stribeck_velocity must be positive".into(),
            ));
        }
        if !(self.viscous >= 0.0) {
            return Err(Error::InvalidParameter(
                "viscous must be non-negative".into(),
            ));
        }
        if !(self.tau_z > 0.0 && self.tau_z.is_finite()) {
            return Err(Error::InvalidParameter(
                "tau_z must be positive and finite".into(),
            ));
        }
        if !self.memory_gain.is_finite() {
            return Err(Error::InvalidParameter("memory_gain must be finite".into()));
        }
        Ok(())
    }
}
