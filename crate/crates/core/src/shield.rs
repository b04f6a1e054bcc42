//! Lyapunov shield: admissible half-space, runtime projection onto
//! box ∩ half-space, and decay / activation accounting.

use nalgebra::{Matrix4, SymmetricEigen, Vector2, Vector4, Vector6};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::controller::{
    control_torque, ControllerParams, ExtendedState, FeatureBasis, LawConfig, ParamBox,
    ParamVector, ParameterSource, PARAM_DIM,
};
use crate::dynamics::{
    acceleration, coriolis_matrix, gravity_vector, mass_matrix, stribeck_force, ControlLaw,
    ControlOutput, PlantParams, PlantState, RefSample, StepContext, Trajectory,
};
use crate::error::{Error, Result};

/// Default decay rate demanded by the shield, 1/s.
pub const DEFAULT_ALPHA: f64 = 0.5;

/// Quadratic `V = ½ ξᵀ P ξ` over `ξ = (e1, e2, ed1, ed2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LyapunovForm {
    pub p: Matrix4<f64>,
    pub alpha: f64,
    /// Gain used to form `s` in the extended state.
    pub sliding_gain: f64,
}

impl LyapunovForm {
    /// Composite sliding form `V = ½(‖Λ₀ e‖² + ‖ed + Λ₀ e‖²)`.
    ///
    /// Its velocity gradient is exactly `s`, so the damping gain enters the
    /// rate only through `sᵀ M⁻¹ s`.
    pub fn sliding(sliding_gain: f64, alpha: f64) -> Self {
        let l = sliding_gain;
        let mut p = Matrix4::zeros();
        for j in 0..2 {
            p[(j, j)] = 2.0 * l * l;
            p[(j, j + 2)] = l;
            p[(j + 2, j)] = l;
            p[(j + 2, j + 2)] = 1.0;
        }
        Self {
            p,
            alpha,
            sliding_gain,
        }
    }

    pub fn from_matrix(p: Matrix4<f64>, alpha: f64, sliding_gain: f64) -> Result<Self> {
        let f = Self {
            p,
            alpha,
            sliding_gain,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        if (self.p - self.p.transpose()).abs().max() > 1e-12 {
            return Err(Error::InvalidParameter(
                "Lyapunov weight must be symmetric".into(),
            ));
        }
        if !(self.lambda_min() > 0.0) {
            return Err(Error::InvalidParameter(
                "Lyapunov weight must be positive definite".into(),
            ));
        }
        if !(self.alpha >= 0.0 && self.sliding_gain > 0.0) {
            return Err(Error::InvalidParameter(
                "alpha must be >= 0 and sliding gain > 0".into(),
            ));
        }
        Ok(())
    }

    pub fn lambda_min(&self) -> f64 {
        SymmetricEigen::new(self.p).eigenvalues.min()
    }

    /// Lipschitz constant of the gradient `ξ ↦ Pξ`.
    pub fn gradient_lipschitz(&self) -> f64 {
        SymmetricEigen::new(self.p).eigenvalues.max()
    }

    fn stack(e: &Vector2<f64>, ed: &Vector2<f64>) -> Vector4<f64> {
        Vector4::new(e[0], e[1], ed[0], ed[1])
    }

    pub fn value(&self, e: &Vector2<f64>, ed: &Vector2<f64>) -> f64 {
        let xi = Self::stack(e, ed);
        0.5 * xi.dot(&(self.p * xi))
    }

    /// `(∂V/∂e, ∂V/∂ed)`.
    pub fn gradient(&self, e: &Vector2<f64>, ed: &Vector2<f64>) -> (Vector2<f64>, Vector2<f64>) {
        let g = self.p * Self::stack(e, ed);
        (Vector2::new(g[0], g[1]), Vector2::new(g[2], g[3]))
    }

    pub fn sliding_vector(&self) -> Vector2<f64> {
        Vector2::repeat(self.sliding_gain)
    }
}

pub fn lyapunov_value(x: &ExtendedState, form: &LyapunovForm) -> f64 {
    form.value(&x.e, &x.ed)
}

/// Inputs for evaluating the shield at one instant.
///
/// `plant` and `state.z` are the true values; `model` is what the control law uses.
#[derive(Debug, Clone, Copy)]
pub struct ShieldContext<'a> {
    pub state: &'a PlantState,
    pub reference: &'a RefSample,
    pub plant: &'a PlantParams,
    pub fric: &'a crate::dynamics::FrictionParams,
    pub model: &'a PlantParams,
    pub basis: &'a FeatureBasis,
}

impl ShieldContext<'_> {
    pub fn extended(&self, form: &LyapunovForm) -> ExtendedState {
        ExtendedState::new(self.state, self.reference, &form.sliding_vector())
    }
}

/// Rate of `V` along the closed loop at parameters `theta`, by the chain rule.
pub fn lyapunov_rate(ctx: &ShieldContext, theta: &ControllerParams, form: &LyapunovForm) -> f64 {
    let x = ctx.extended(form);
    let tau = control_torque(&x, ctx.reference, theta, ctx.model, ctx.basis);
    let qdd = acceleration(
        &ctx.state.q,
        &ctx.state.qd,
        &ctx.state.z,
        &tau,
        ctx.plant,
        ctx.fric,
    );
    let edd = ctx.reference.qdd - qdd;
    let (ge, ged) = form.gradient(&x.e, &x.ed);
    ge.dot(&x.ed) + ged.dot(&edd)
}

/// The decay condition written as an affine inequality in the parameters:
/// `kdᵀA1 + lambdaᵀA2 + etaᵀB + a0 + b0 ≤ c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HalfspaceCoeffs {
    pub a1: Vector2<f64>,
    pub a2: Vector2<f64>,
    pub b: Vector6<f64>,
    pub a0: f64,
    pub b0: f64,
    pub c: f64,
}

impl HalfspaceCoeffs {
    pub fn normal(&self) -> ParamVector {
        ControllerParams {
            kd: self.a1,
            lambda: self.a2,
            eta: self.b,
        }
        .to_vector()
    }

    /// Right-hand side once the constant offsets are moved across.
    pub fn rhs(&self) -> f64 {
        self.c - self.a0 - self.b0
    }

    pub fn lhs(&self, theta: &ControllerParams) -> f64 {
        self.normal().dot(&theta.to_vector()) + self.a0 + self.b0
    }

    pub fn admits(&self, theta: &ControllerParams) -> bool {
        self.lhs(theta) <= self.c
    }

    /// Smallest value of the parameter-dependent part over the box.
    pub fn box_minimum(&self, bounds: &ParamBox) -> f64 {
        let a = self.normal();
        (0..PARAM_DIM)
            .map(|i| (a[i] * bounds.lower[i]).min(a[i] * bounds.upper[i]))
            .sum()
    }

    fn tolerance(&self, theta: &ParamVector) -> f64 {
        1e-10 * (1.0 + self.rhs().abs() + self.normal().norm() * theta.norm())
    }
}

pub fn halfspace_coeffs(ctx: &ShieldContext, form: &LyapunovForm) -> HalfspaceCoeffs {
    let x = ctx.extended(form);
    let r = ctx.reference;
    let (q, qd) = (&ctx.state.q, &ctx.state.qd);

    let m = mass_matrix(q, ctx.plant);
    let m_chol = m.cholesky().expect("mass matrix is positive definite");
    let drift = -(coriolis_matrix(q, qd, ctx.plant) * qd
        + gravity_vector(q, ctx.plant)
        + stribeck_force(qd, &ctx.state.z, ctx.fric));
    let qdd_free = m_chol.solve(&drift);

    let (ge, ged) = form.gradient(&x.e, &x.ed);
    let b = -m_chol.solve(&ged);
    let c = -form.alpha * form.value(&x.e, &x.ed) - ge.dot(&x.ed) - ged.dot(&(r.qdd - qdd_free));

    let mh = mass_matrix(q, ctx.model);
    let ch = coriolis_matrix(q, qd, ctx.model);
    let gh = gravity_vector(q, ctx.model);
    let mb = mh * b;
    let cb = ch.transpose() * b;
    HalfspaceCoeffs {
        a1: b.component_mul(&x.s),
        a2: x.ed.component_mul(&mb) + x.e.component_mul(&cb),
        b: ctx.basis.features(qd).transpose() * b,
        a0: b.dot(&(mh * r.qdd + ch * r.qd + gh)),
        b0: 0.0,
        c,
    }
}

pub fn is_admissible(ctx: &ShieldContext, theta: &ControllerParams, form: &LyapunovForm) -> bool {
    halfspace_coeffs(ctx, form).admits(theta)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub params: ControllerParams,
    /// True when the output differs from the input.
    pub altered: bool,
    pub distance: f64,
}

/// Euclidean projection of `raw` onto the box intersected with the half-space.
///
/// Solves the single-multiplier KKT system: `θ(μ) = clip(raw − μ a)` with `μ`
/// found by bisection, then polished by an exact solve on the free set.
pub fn project_admissible(
    coeffs: &HalfspaceCoeffs,
    raw: &ControllerParams,
    bounds: &ParamBox,
) -> Result<Projection> {
    let a = coeffs.normal();
    let rhs = coeffs.rhs();
    let t0 = raw.to_vector();

    let done = |v: ParamVector| {
        let params = ControllerParams::from_vector(&v);
        let altered = v != t0;
        Ok(Projection {
            params,
            altered,
            distance: (v - t0).norm(),
        })
    };

    if bounds.contains(&t0) && a.dot(&t0) <= rhs + coeffs.tolerance(&t0) {
        return done(t0);
    }
    let clipped = bounds.clip(&t0);
    if a.dot(&clipped) <= rhs + coeffs.tolerance(&clipped) {
        return done(clipped);
    }
    let box_min = coeffs.box_minimum(bounds);
    if box_min > rhs + coeffs.tolerance(&clipped) {
        return Err(Error::EmptyAdmissibleSet { box_min, rhs });
    }

    let theta = |mu: f64| bounds.clip(&(t0 - a * mu));
    let g = |mu: f64| a.dot(&theta(mu));

    let (mut lo, mut hi) = (0.0, 1.0);
    let mut guard = 0;
    while g(hi) > rhs {
        lo = hi;
        hi *= 2.0;
        guard += 1;
        if guard > 2100 {
            return Err(Error::EmptyAdmissibleSet { box_min, rhs });
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) > rhs {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * hi {
            break;
        }
    }

    // Exact multiplier on the active pattern at `hi`.
    let th = theta(hi);
    let free: Vec<usize> = (0..PARAM_DIM)
        .filter(|&i| {
            let u = t0[i] - hi * a[i];
            u > bounds.lower[i] && u < bounds.upper[i] && a[i] != 0.0
        })
        .collect();
    let mut best = th;
    if !free.is_empty() {
        let fixed: f64 = (0..PARAM_DIM)
            .filter(|i| !free.contains(i))
            .map(|i| a[i] * th[i])
            .sum();
        let num: f64 = free.iter().map(|&i| a[i] * t0[i]).sum::<f64>() + fixed - rhs;
        let den: f64 = free.iter().map(|&i| a[i] * a[i]).sum();
        let mu = num / den;
        if mu.is_finite() && mu >= 0.0 {
            let cand = theta(mu);
            if a.dot(&cand) <= rhs + coeffs.tolerance(&cand) {
                best = cand;
            }
        }
    }
    done(best)
}

/// Per-step shield bookkeeping stored in the trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShieldStep {
    pub active: bool,
    pub distance: f64,
    pub lyapunov: f64,
    /// The admissible set was empty; the box point with the smallest rate was used.
    pub empty: bool,
}

/// Computed-torque law whose parameters pass through the projection.
pub struct ShieldedLaw<S> {
    pub source: S,
    pub config: LawConfig,
    pub form: LyapunovForm,
    pub bounds: ParamBox,
    model: PlantParams,
}

impl<S: ParameterSource> ShieldedLaw<S> {
    pub fn new(source: S, config: LawConfig, bounds: ParamBox, alpha: f64) -> Self {
        let form = LyapunovForm::sliding(config.sliding_gain, alpha);
        Self {
            source,
            config,
            form,
            bounds,
            model: PlantParams::default(),
        }
    }

    pub fn model(&self) -> &PlantParams {
        &self.model
    }
}

fn least_violating(coeffs: &HalfspaceCoeffs, raw: &ParamVector, bounds: &ParamBox) -> ParamVector {
    let a = coeffs.normal();
    ParamVector::from_fn(|i, _| {
        if a[i] > 0.0 {
            bounds.lower[i]
        } else if a[i] < 0.0 {
            bounds.upper[i]
        } else {
            raw[i].clamp(bounds.lower[i], bounds.upper[i])
        }
    })
}

impl<S: ParameterSource> ControlLaw for ShieldedLaw<S> {
    fn reset(&mut self, plant: &PlantParams, rng: &mut ChaCha8Rng) {
        self.model = plant.with_payload(self.config.payload_model.estimate(plant.payload, rng));
        self.source.reset(rng);
    }

    fn control(&mut self, ctx: &StepContext) -> ControlOutput {
        let sctx = ShieldContext {
            state: ctx.state,
            reference: ctx.reference,
            plant: ctx.plant,
            fric: ctx.fric,
            model: &self.model,
            basis: &self.config.basis,
        };
        let x = sctx.extended(&self.form);
        let raw = self.source.propose(ctx, &x);
        let coeffs = halfspace_coeffs(&sctx, &self.form);
        let (params, step) = match project_admissible(&coeffs, &raw, &self.bounds) {
            Ok(p) => (
                p.params,
                ShieldStep {
                    active: p.altered,
                    distance: p.distance,
                    lyapunov: lyapunov_value(&x, &self.form),
                    empty: false,
                },
            ),
            Err(_) => {
                let rv = raw.to_vector();
                let v = least_violating(&coeffs, &rv, &self.bounds);
                (
                    ControllerParams::from_vector(&v),
                    ShieldStep {
                        active: true,
                        distance: (v - rv).norm(),
                        lyapunov: lyapunov_value(&x, &self.form),
                        empty: true,
                    },
                )
            }
        };
        let torque = control_torque(&x, ctx.reference, &params, &self.model, &self.config.basis);
        ControlOutput {
            torque,
            params,
            shield: Some(step),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayReport {
    pub alpha: f64,
    /// `max_t V(t) / (V(0) e^{-αt})`.
    pub max_ratio: f64,
    /// `max_k V(t_{k+1}) / (V(t_k) e^{-α dt})`.
    pub max_step_ratio: f64,
}

impl DecayReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_ratio <= 1.0 + tolerance
    }
}

pub fn verify_exponential_decay(traj: &Trajectory, form: &LyapunovForm, alpha: f64) -> DecayReport {
    let g = form.sliding_vector();
    let v: Vec<f64> = traj
        .records
        .iter()
        .map(|r| lyapunov_value(&ExtendedState::new(&r.state, &r.reference, &g), form))
        .collect();
    let mut report = DecayReport {
        alpha,
        max_ratio: 0.0,
        max_step_ratio: 0.0,
    };
    let Some(&v0) = v.first() else { return report };
    if v0 <= 0.0 {
        return report;
    }
    for (k, r) in traj.records.iter().enumerate() {
        let t = r.t - traj.records[0].t;
        report.max_ratio = report.max_ratio.max(v[k] / (v0 * (-alpha * t).exp()));
        if k > 0 && v[k - 1] > 0.0 {
            report.max_step_ratio = report
                .max_step_ratio
                .max(v[k] / (v[k - 1] * (-alpha * traj.dt).exp()));
        }
    }
    report
}

pub fn shield_activation_fraction(traj: &Trajectory) -> f64 {
    let flags: Vec<bool> = traj
        .records
        .iter()
        .filter_map(|r| r.shield.map(|s| s.active))
        .collect();
    if flags.is_empty() {
        return 0.0;
    }
    flags.iter().filter(|&&a| a).count() as f64 / flags.len() as f64
}

/// Summary emitted alongside a shielded rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShieldReport {
    pub activation_fraction: f64,
    pub empty_steps: usize,
    pub decay: DecayReport,
    /// `(upper edge, count)` of projection distances on active steps.
    pub distance_histogram: Vec<(f64, usize)>,
}

pub fn shield_report(traj: &Trajectory, form: &LyapunovForm, bins: usize) -> ShieldReport {
    let dists: Vec<f64> = traj
        .records
        .iter()
        .filter_map(|r| r.shield.filter(|s| s.active).map(|s| s.distance))
        .collect();
    let max = dists.iter().copied().fold(0.0, f64::max);
    let bins = bins.max(1);
    let width = if max > 0.0 { max / bins as f64 } else { 1.0 };
    let mut hist: Vec<(f64, usize)> = (1..=bins).map(|k| (k as f64 * width, 0)).collect();
    for d in &dists {
        let k = ((d / width).ceil() as usize).clamp(1, bins) - 1;
        hist[k].1 += 1;
    }
    ShieldReport {
        activation_fraction: shield_activation_fraction(traj),
        empty_steps: traj
            .records
            .iter()
            .filter(|r| r.shield.is_some_and(|s| s.empty))
            .count(),
        decay: verify_exponential_decay(traj, form, form.alpha),
        distance_histogram: hist,
    }
}
