//! Desired joint trajectories.

use std::f64::consts::PI;

use nalgebra::Vector2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Desired position, velocity and acceleration at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefSample {
    pub q: Vector2<f64>,
    pub qd: Vector2<f64>,
    pub qdd: Vector2<f64>,
}

pub trait Reference: Sync {
    fn sample(&self, t: f64) -> RefSample;
}

/// Independent sinusoid per joint: `q_d = A sin(w t + phi)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReferenceSpec {
    pub amplitude: [f64; 2],
    pub omega: [f64; 2],
    pub phase: [f64; 2],
    pub horizon: f64,
}

impl Default for ReferenceSpec {
    fn default() -> Self {
        Self {
            amplitude: [0.5, 0.3],
            omega: [2.0 * PI / 1.7, 2.0 * PI / 2.3],
            phase: [0.0, 0.0],
            horizon: 5.0,
        }
    }
}

impl ReferenceSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0) || self.omega.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::InvalidParameter(
                "horizon and frequencies must be positive".into(),
            ));
        }
        if self
            .amplitude
            .iter()
            .chain(self.phase.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::InvalidParameter(
                "amplitudes and phases must be finite".into(),
            ));
        }
        if !self.incommensurate() {
            return Err(Error::InvalidParameter(format!(
                "joint periods share a common period within the {} s horizon",
                self.horizon
            )));
        }
        Ok(())
    }

    /// True when no common period of the two joints fits inside the horizon.
    pub fn incommensurate(&self) -> bool {
        let t1 = 2.0 * PI / self.omega[0];
        let t2 = 2.0 * PI / self.omega[1];
        let max_b = (self.horizon / t1).floor() as usize;
        (1..=max_b).all(|b| {
            let a = (b as f64 * t1 / t2).round();
            a < 1.0 || (b as f64 * t1 - a * t2).abs() > 1e-9 * t1
        })
    }

    /// Velocity variance of joint `j` over a period.
    pub fn velocity_variance(&self, j: usize) -> f64 {
        let v = self.amplitude[j] * self.omega[j];
        0.5 * v * v
    }

    /// Velocity autocorrelation of joint `j` at `lag`.
    pub fn velocity_autocorrelation(&self, j: usize, lag: f64) -> f64 {
        (self.omega[j] * lag).cos()
    }
}

impl Reference for ReferenceSpec {
    fn sample(&self, t: f64) -> RefSample {
        let mut r = RefSample {
            q: Vector2::zeros(),
            qd: Vector2::zeros(),
            qdd: Vector2::zeros(),
        };
        for j in 0..2 {
            let (a, w) = (self.amplitude[j], self.omega[j]);
            let (s, c) = (w * t + self.phase[j]).sin_cos();
            r.q[j] = a * s;
            r.qd[j] = a * w * c;
            r.qdd[j] = -a * w * w * s;
        }
        r
    }
}

/// Sum of sinusoids per joint with randomly drawn frequencies and phases.
///
/// Used wherever the instantaneous state must not pin down the recent
/// velocity history (a single sinusoid traces a closed curve in `(q, qd)`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultisineReference {
    /// `(amplitude, omega, phase)` per component, per joint.
    pub components: [Vec<(f64, f64, f64)>; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MultisineSpec {
    pub components: usize,
    pub omega_min: f64,
    pub omega_max: f64,
    /// Position RMS per joint, rad.
    pub rms: [f64; 2],
}

impl Default for MultisineSpec {
    fn default() -> Self {
        Self {
            components: 6,
            omega_min: 0.5,
            omega_max: 6.0,
            rms: [0.3, 0.2],
        }
    }
}

impl MultisineReference {
    pub fn random(spec: &MultisineSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = spec.components.max(1);
        let components = [0, 1].map(|j| {
            let a = spec.rms[j] * (2.0 / n as f64).sqrt();
            (0..n)
                .map(|_| {
                    let w = rng.random_range(spec.omega_min..spec.omega_max);
                    let phi = rng.random_range(0.0..2.0 * PI);
                    (a, w, phi)
                })
                .collect()
        });
        Self { components }
    }
}

impl Reference for MultisineReference {
    fn sample(&self, t: f64) -> RefSample {
        let mut r = RefSample {
            q: Vector2::zeros(),
            qd: Vector2::zeros(),
            qdd: Vector2::zeros(),
        };
        for j in 0..2 {
            for &(a, w, phi) in &self.components[j] {
                let (s, c) = (w * t + phi).sin_cos();
                r.q[j] += a * s;
                r.qd[j] += a * w * c;
                r.qdd[j] -= a * w * w * s;
            }
        }
        r
    }
}
