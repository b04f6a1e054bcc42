//! History gradients of the friction memory, the temporal residual operator,
//! effective rank, and the conditional variance of the memory.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controller::{baseline_law, LawConfig};
use crate::dynamics::{
    memory_step_rk4, rollout, simulate_from, ControlLaw, FrictionParams, PlantParams, Reference,
    RolloutConfig, Trajectory,
};
use crate::error::{Error, Result};
use nalgebra::Vector2;

/// `λ_z e^{-k dt / τ_z}` for lags `k = 1..=w`.
pub fn history_gradient_analytic(tau_z: f64, w: usize, dt: f64, lambda_z: f64) -> DVector<f64> {
    DVector::from_fn(w, |i, _| lambda_z * (-((i + 1) as f64) * dt / tau_z).exp())
}

fn check_fd_args(index: usize, w: usize, delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "perturbation size must be positive, got {delta}"
        )));
    }
    if w == 0 {
        return Err(Error::InvalidParameter("window must be at least 1".into()));
    }
    if index < w {
        return Err(Error::InsufficientHistory {
            needed: w,
            available: index,
            index,
        });
    }
    Ok(())
}

/// Finite-difference history gradient by replaying the memory alone.
///
/// Lag `k` is perturbed by adding `λ_z·dt·δ` to the memory drive at step
/// `index − k`; the replay then follows the recorded velocities with the
/// same RK4 step as the plant. Entries are normalised per unit velocity-time,
/// so they are directly comparable with [`history_gradient_analytic`].
pub fn history_gradient_fd_open_loop(
    traj: &Trajectory,
    index: usize,
    joint: usize,
    w: usize,
    delta: f64,
    fric: &FrictionParams,
) -> Result<DVector<f64>> {
    check_fd_args(index, w, delta)?;
    if index > traj.records.len() {
        return Err(Error::InsufficientHistory {
            needed: index,
            available: traj.records.len(),
            index,
        });
    }
    let dt = traj.dt;
    let replay = |lag: usize, sign: f64| {
        let start = index - w;
        let mut z = traj.records[start].state.z;
        for j in start..index {
            if j == index - lag {
                z[joint] += sign * fric.memory_gain * dt * delta;
            }
            z = memory_step_rk4(&z, &traj.records[j].state.qd, dt, fric);
        }
        z[joint]
    };
    Ok(DVector::from_fn(w, |i, _| {
        let k = i + 1;
        (replay(k, 1.0) - replay(k, -1.0)) / (2.0 * delta * dt)
    }))
}

/// Finite-difference history gradient through the closed loop.
///
/// The full plant state is restored at `index − k`, the memory drive is
/// perturbed as in [`history_gradient_fd_open_loop`], and the plant is
/// re-simulated under `law` for `k` steps. `law` must be the already-reset
/// law that produced `traj`.
#[allow(clippy::too_many_arguments)]
pub fn history_gradient_fd_closed_loop(
    law: &mut dyn ControlLaw,
    reference: &dyn Reference,
    plant: &PlantParams,
    fric: &FrictionParams,
    traj: &Trajectory,
    index: usize,
    joint: usize,
    w: usize,
    delta: f64,
    config: &RolloutConfig,
) -> Result<DVector<f64>> {
    check_fd_args(index, w, delta)?;
    if index >= traj.records.len() {
        return Err(Error::InsufficientHistory {
            needed: index + 1,
            available: traj.records.len(),
            index,
        });
    }
    let dt = traj.dt;
    let mut g = DVector::zeros(w);
    for k in 1..=w {
        let mut out = [0.0; 2];
        for (slot, sign) in [1.0, -1.0].into_iter().enumerate() {
            let mut s = traj.records[index - k].state;
            s.z[joint] += sign * fric.memory_gain * dt * delta;
            let (_, end, _) = simulate_from(law, reference, plant, fric, s, k, config);
            out[slot] = end.z[joint];
        }
        g[k - 1] = (out[0] - out[1]) / (2.0 * delta * dt);
    }
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMode {
    Analytic,
    OpenLoopFd,
    ClosedLoopFd,
}

/// `W×W` second-moment matrix of history gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalResidualOperator {
    pub matrix: DMatrix<f64>,
    pub n_samples: usize,
    pub tau_z: f64,
    pub mode: GradientMode,
}

impl TemporalResidualOperator {
    pub fn window(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn effective_rank(&self) -> Result<f64> {
        effective_rank(&self.matrix)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in 0..self.matrix.nrows() {
            w.write_record(self.matrix.row(r).iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Running sum of outer products; partial sums merge associatively.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorAccumulator {
    sum: DMatrix<f64>,
    count: usize,
}

impl OperatorAccumulator {
    pub fn new(w: usize) -> Self {
        Self {
            sum: DMatrix::zeros(w, w),
            count: 0,
        }
    }

    pub fn add(&mut self, g: &DVector<f64>) {
        self.sum.ger(1.0, g, g, 1.0);
        self.count += 1;
    }

    pub fn merge(mut self, other: Self) -> Self {
        self.sum += other.sum;
        self.count += other.count;
        self
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn finish(self, tau_z: f64, mode: GradientMode) -> Result<TemporalResidualOperator> {
        if self.count == 0 {
            return Err(Error::InsufficientSamples(
                "operator needs at least one gradient sample".into(),
            ));
        }
        let mut m = self.sum / self.count as f64;
        m = (&m + m.transpose()) * 0.5;
        Ok(TemporalResidualOperator {
            matrix: m,
            n_samples: self.count,
            tau_z,
            mode,
        })
    }
}

/// `(1/N) Σ g gᵀ`.
pub fn build_residual_operator(
    samples: &[DVector<f64>],
    tau_z: f64,
    mode: GradientMode,
) -> Result<TemporalResidualOperator> {
    let w = samples.first().map(|g| g.len()).unwrap_or(0);
    let mut acc = OperatorAccumulator::new(w);
    for g in samples {
        if g.len() != w {
            return Err(Error::InvalidParameter(
                "gradient samples differ in length".into(),
            ));
        }
        acc.add(g);
    }
    acc.finish(tau_z, mode)
}

/// Stable rank `tr(M)² / ‖M‖_F²`.
pub fn effective_rank(m: &DMatrix<f64>) -> Result<f64> {
    let f2 = m.norm_squared();
    if f2 == 0.0 {
        return Err(Error::ZeroMatrix);
    }
    let tr = m.trace();
    Ok(tr * tr / f2)
}

/// Effective rank with `r_eff(0) := 0`; matrices whose Frobenius norm is
/// below `rel_tol · scale` count as zero.
pub fn effective_rank_or_zero(m: &DMatrix<f64>, scale: f64, rel_tol: f64) -> f64 {
    let f = m.norm();
    if f <= rel_tol * scale || f == 0.0 {
        0.0
    } else {
        let tr = m.trace();
        tr * tr / (f * f)
    }
}

/// Squared norm of the analytic gradient, by the geometric-series closed form.
pub fn v_norm_sq(tau_z: f64, w: usize, dt: f64, lambda_z: f64) -> f64 {
    let r = (-2.0 * dt / tau_z).exp();
    let rw = (-2.0 * w as f64 * dt / tau_z).exp();
    lambda_z * lambda_z * r * (1.0 - rw) / (1.0 - r)
}

/// Closed-form memory variance `λ_z² σ_q̇² (τ_z/2)(1 − ρ_q̇(τ_z))`.
pub fn sigma_z_closed_form(
    tau_z: f64,
    lambda_z: f64,
    qd_variance: f64,
    rho_at_tau: f64,
) -> Result<f64> {
    if !(qd_variance >= 0.0) || !(-1.0..=1.0).contains(&rho_at_tau) || !(tau_z >= 0.0) {
        return Err(Error::InvalidParameter(
            "need variance >= 0, tau >= 0, autocorrelation in [-1, 1]".into(),
        ));
    }
    Ok(lambda_z * lambda_z * qd_variance * (tau_z / 2.0) * (1.0 - rho_at_tau))
}

/// Uniform grid over `(q, qd)` of one joint, spanning the central quantile
/// range of the data; points outside are clamped into the edge bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateBinning {
    pub bins: usize,
    pub q_range: (f64, f64),
    pub qd_range: (f64, f64),
}

impl StateBinning {
    pub const DEFAULT_BINS: usize = 12;
    const TAIL: f64 = 0.005;

    pub fn fit(points: &[(f64, f64)], bins: usize) -> Result<Self> {
        if points.is_empty() || bins == 0 {
            return Err(Error::InsufficientSamples(
                "binning needs points and at least one bin".into(),
            ));
        }
        let range = |mut v: Vec<f64>| {
            v.sort_by(f64::total_cmp);
            let n = v.len();
            let lo = v[((n as f64 - 1.0) * Self::TAIL).floor() as usize];
            let hi = v[((n as f64 - 1.0) * (1.0 - Self::TAIL)).ceil() as usize];
            if hi > lo {
                (lo, hi)
            } else {
                (lo - 0.5, lo + 0.5)
            }
        };
        Ok(Self {
            bins,
            q_range: range(points.iter().map(|p| p.0).collect()),
            qd_range: range(points.iter().map(|p| p.1).collect()),
        })
    }

    fn axis(v: f64, (lo, hi): (f64, f64), bins: usize) -> usize {
        let u = ((v - lo) / (hi - lo) * bins as f64).floor();
        (u.max(0.0) as usize).min(bins - 1)
    }

    pub fn index(&self, q: f64, qd: f64) -> usize {
        Self::axis(q, self.q_range, self.bins) * self.bins
            + Self::axis(qd, self.qd_range, self.bins)
    }

    pub fn cells(&self) -> usize {
        self.bins * self.bins
    }
}

/// One sample of the memory together with the observable state of a joint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemorySample {
    pub q: f64,
    pub qd: f64,
    pub z: f64,
}

/// `E[Var(z | bin(q, qd))]` with population variance inside each bin.
pub fn binned_conditional_variance(
    samples: &[MemorySample],
    binning: &StateBinning,
    min_count: usize,
) -> Result<f64> {
    let mut n = vec![0usize; binning.cells()];
    let mut s = vec![0.0; binning.cells()];
    let mut s2 = vec![0.0; binning.cells()];
    for m in samples {
        let b = binning.index(m.q, m.qd);
        n[b] += 1;
        s[b] += m.z;
        s2[b] += m.z * m.z;
    }
    if let Some((b, c)) = n.iter().enumerate().find(|(_, &c)| c > 0 && c < min_count) {
        return Err(Error::InsufficientSamples(format!(
            "bin {b} holds {c} samples, need at least {min_count}"
        )));
    }
    let total: usize = n.iter().sum();
    if total == 0 {
        return Err(Error::InsufficientSamples("no samples".into()));
    }
    let mut acc = 0.0;
    for b in 0..binning.cells() {
        if n[b] == 0 {
            continue;
        }
        let mean = s[b] / n[b] as f64;
        let var = (s2[b] / n[b] as f64 - mean * mean).max(0.0);
        acc += n[b] as f64 * var;
    }
    Ok(acc / total as f64)
}

/// Settings for collecting memory samples from baseline closed-loop rollouts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub rollout: RolloutConfig,
    pub joint: usize,
    /// Keep every `stride`-th step.
    pub stride: usize,
    /// Steps discarded at the start of each rollout.
    pub burn_in: usize,
    pub bins: usize,
    pub min_bin_count: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            rollout: RolloutConfig::default(),
            joint: 0,
            stride: 1,
            burn_in: 0,
            bins: StateBinning::DEFAULT_BINS,
            min_bin_count: 5,
        }
    }
}

/// Samples of `(q, qd, z)` from `n_traj` baseline rollouts with seeds
/// `seed, seed + 1, ...`. `reference_for(seed)` builds each rollout's reference.
pub fn collect_memory_samples<R, F>(
    reference_for: F,
    plant: &PlantParams,
    fric: &FrictionParams,
    law_config: LawConfig,
    n_traj: usize,
    seed: u64,
    config: &SamplingConfig,
) -> Result<Vec<Vec<MemorySample>>>
where
    R: Reference,
    F: Fn(u64) -> R + Sync,
{
    let stride = config.stride.max(1);
    (0..n_traj as u64)
        .into_par_iter()
        .map(|i| {
            let s = seed + i;
            let reference = reference_for(s);
            let mut law = baseline_law(law_config);
            let traj = rollout(&mut law, &reference, plant, fric, s, &config.rollout)?;
            if traj.diverged {
                return Err(Error::Diverged {
                    t: traj.final_state.t,
                    bound: config.rollout.blowup_bound,
                });
            }
            Ok(traj
                .records
                .iter()
                .skip(config.burn_in)
                .step_by(stride)
                .map(|r| MemorySample {
                    q: r.state.q[config.joint],
                    qd: r.state.qd[config.joint],
                    z: r.state.z[config.joint],
                })
                .collect())
        })
        .collect()
}

/// Monte-Carlo estimate of `E[Var(z | q, qd)]` over baseline rollouts.
pub fn sigma_z_monte_carlo<R, F>(
    reference_for: F,
    plant: &PlantParams,
    fric: &FrictionParams,
    law_config: LawConfig,
    n_traj: usize,
    seed: u64,
    config: &SamplingConfig,
) -> Result<f64>
where
    R: Reference,
    F: Fn(u64) -> R + Sync,
{
    if n_traj < 100 {
        return Err(Error::InsufficientSamples(format!(
            "need at least 100 trajectories, got {n_traj}"
        )));
    }
    let per_traj =
        collect_memory_samples(reference_for, plant, fric, law_config, n_traj, seed, config)?;
    let samples: Vec<MemorySample> = per_traj.into_iter().flatten().collect();
    let points: Vec<(f64, f64)> = samples.iter().map(|m| (m.q, m.qd)).collect();
    let binning = StateBinning::fit(&points, config.bins)?;
    binned_conditional_variance(&samples, &binning, config.min_bin_count)
}

/// Empirical velocity variance and autocorrelation at `lag` for one joint,
/// pooled over trajectories.
pub fn velocity_statistics(trajectories: &[Vec<f64>], dt: f64, lag: f64) -> (f64, f64) {
    let k = (lag / dt).round() as usize;
    let all: Vec<f64> = trajectories.iter().flatten().copied().collect();
    let n = all.len().max(1) as f64;
    let mean = all.iter().sum::<f64>() / n;
    let var = all.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let (mut c, mut m) = (0.0, 0usize);
    for tr in trajectories {
        for i in k..tr.len() {
            c += (tr[i] - mean) * (tr[i - k] - mean);
            m += 1;
        }
    }
    let rho = if m > 0 && var > 0.0 {
        (c / m as f64) / var
    } else {
        0.0
    };
    (var, rho.clamp(-1.0, 1.0))
}

/// Memory of a linear system driven by a prescribed velocity trace, as used
/// by the open-loop checks.
pub fn replay_memory(qd: &[f64], z0: f64, dt: f64, fric: &FrictionParams) -> Vec<f64> {
    let mut z = Vector2::new(z0, 0.0);
    let mut out = Vec::with_capacity(qd.len() + 1);
    out.push(z0);
    for &v in qd {
        z = memory_step_rk4(&z, &Vector2::new(v, 0.0), dt, fric);
        out.push(z[0]);
    }
    out
}
