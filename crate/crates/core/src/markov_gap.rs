//! Excess cost of memoryless versus windowed meta-control on a quadratic
//! surrogate driven by the simulated memory process.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::controller::{fixed_gain_baseline, LawConfig, ParamVector, PARAM_DIM};
use crate::dynamics::{
    FrictionParams, MultisineReference, MultisineSpec, PlantParams, RolloutConfig,
};
use crate::error::{Error, Result};
use crate::memory_analysis::{
    binned_conditional_variance, collect_memory_samples, sigma_z_closed_form, velocity_statistics,
    MemorySample, SamplingConfig, StateBinning,
};

/// `ℓ(θ, z) = (μ/2)‖θ − (θ0 + κ z d)‖²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuadCostSpec {
    pub mu: f64,
    pub kappa: f64,
    pub theta0: ParamVector,
    /// Unit direction along which the optimum moves with `z`.
    pub direction: ParamVector,
}

impl Default for QuadCostSpec {
    fn default() -> Self {
        Self {
            mu: 1.0,
            kappa: 1.0,
            theta0: fixed_gain_baseline().to_vector(),
            direction: ParamVector::repeat(1.0 / (PARAM_DIM as f64).sqrt()),
        }
    }
}

impl QuadCostSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0 && self.kappa > 0.0) {
            return Err(Error::InvalidParameter(
                "mu and kappa must be positive".into(),
            ));
        }
        if (self.direction.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(
                "cost direction must be a unit vector".into(),
            ));
        }
        Ok(())
    }

    pub fn cost(&self, theta: &ParamVector, z: f64) -> f64 {
        0.5 * self.mu * (theta - self.optimum(z)).norm_squared()
    }

    fn optimum(&self, z: f64) -> ParamVector {
        self.theta0 + self.direction * (self.kappa * z)
    }

    /// Excess cost per unit conditional variance, `μκ²/2`.
    pub fn c1(&self) -> f64 {
        0.5 * self.mu * self.kappa * self.kappa
    }
}

/// Minimiser of the surrogate cost; the observable state does not enter.
pub fn pointwise_optimum(_q: f64, _qd: f64, z: f64, cost: &QuadCostSpec) -> ParamVector {
    cost.optimum(z)
}

/// A meta-controller evaluated on recorded traces. `None` means the policy
/// cannot act at step `i` (too little history).
pub trait MetaPolicy {
    fn act(&self, trace: &[MemorySample], i: usize) -> Option<ParamVector>;
}

/// Knows `z`: the pointwise optimum itself.
pub struct OraclePolicy(pub QuadCostSpec);

impl MetaPolicy for OraclePolicy {
    fn act(&self, trace: &[MemorySample], i: usize) -> Option<ParamVector> {
        let m = trace[i];
        Some(pointwise_optimum(m.q, m.qd, m.z, &self.0))
    }
}

/// Conditional mean of the optimum given the binned instantaneous state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovianPolicy {
    pub binning: StateBinning,
    /// Mean memory per bin; empty bins fall back to the global mean.
    pub bin_mean_z: Vec<f64>,
    pub cost: QuadCostSpec,
}

impl MarkovianPolicy {
    pub fn predict_z(&self, q: f64, qd: f64) -> f64 {
        self.bin_mean_z[self.binning.index(q, qd)]
    }
}

impl MetaPolicy for MarkovianPolicy {
    fn act(&self, trace: &[MemorySample], i: usize) -> Option<ParamVector> {
        let m = trace[i];
        Some(self.cost.optimum(self.predict_z(m.q, m.qd)))
    }
}

pub const MIN_MARKOV_SAMPLES: usize = 1000;

pub fn markovian_policy_fit(
    samples: &[MemorySample],
    cost: &QuadCostSpec,
    bins: usize,
) -> Result<MarkovianPolicy> {
    cost.validate()?;
    if samples.len() < MIN_MARKOV_SAMPLES {
        return Err(Error::InsufficientSamples(format!(
            "need at least {MIN_MARKOV_SAMPLES} samples, got {}",
            samples.len()
        )));
    }
    let points: Vec<(f64, f64)> = samples.iter().map(|m| (m.q, m.qd)).collect();
    let binning = StateBinning::fit(&points, bins)?;
    let mut n = vec![0usize; binning.cells()];
    let mut s = vec![0.0; binning.cells()];
    for m in samples {
        let b = binning.index(m.q, m.qd);
        n[b] += 1;
        s[b] += m.z;
    }
    let global = s.iter().sum::<f64>() / samples.len() as f64;
    let bin_mean_z = n
        .iter()
        .zip(&s)
        .map(|(&c, &t)| if c > 0 { t / c as f64 } else { global })
        .collect();
    Ok(MarkovianPolicy {
        binning,
        bin_mean_z,
        cost: *cost,
    })
}

/// Linear map from the velocity lags `qd(t), qd(t−1), …, qd(t−W+1)` to `z(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowedReconstructor {
    pub window: usize,
    pub weights: DVector<f64>,
    pub ridge: f64,
    /// RMS in-sample fit residual.
    pub residual: f64,
}

impl WindowedReconstructor {
    /// `None` when fewer than `window` samples precede and include `i`.
    pub fn predict(&self, trace: &[MemorySample], i: usize) -> Option<f64> {
        if i + 1 < self.window || i >= trace.len() {
            return None;
        }
        Some(
            (0..self.window)
                .map(|l| self.weights[l] * trace[i - l].qd)
                .sum(),
        )
    }

    /// RMS reconstruction error over every step from `start` on.
    pub fn rmse(&self, traces: &[Vec<MemorySample>], start: usize) -> Result<f64> {
        let (mut s, mut n) = (0.0, 0usize);
        for tr in traces {
            for i in start.max(self.window - 1)..tr.len() {
                let e = self.predict(tr, i).expect("index checked") - tr[i].z;
                s += e * e;
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::InsufficientSamples(
                "no evaluation steps with a full window".into(),
            ));
        }
        Ok((s / n as f64).sqrt())
    }
}

/// Ridge regression of `z(t)` on the `w` most recent velocities, without an
/// intercept, using every `row_stride`-th step from `start` on.
///
/// `ridge = None` uses `1e-6·tr(XᵀX)/W`.
pub fn windowed_reconstructor_fit(
    traces: &[Vec<MemorySample>],
    w: usize,
    ridge: Option<f64>,
    start: usize,
    row_stride: usize,
) -> Result<WindowedReconstructor> {
    if w == 0 {
        return Err(Error::InvalidParameter("window must be at least 1".into()));
    }
    let stride = row_stride.max(1);
    let first = start.max(w - 1);
    let mut xtx = DMatrix::<f64>::zeros(w, w);
    let mut xty = DVector::<f64>::zeros(w);
    let mut yy = 0.0;
    let mut rows = 0usize;
    let mut x = DVector::<f64>::zeros(w);
    for tr in traces {
        if tr.len() < w + 1 {
            return Err(Error::InsufficientHistory {
                needed: w + 1,
                available: tr.len(),
                index: tr.len(),
            });
        }
        for i in (first..tr.len()).step_by(stride) {
            for l in 0..w {
                x[l] = tr[i - l].qd;
            }
            xtx.syger(1.0, &x, &x, 1.0);
            xty.axpy(tr[i].z, &x, 1.0);
            yy += tr[i].z * tr[i].z;
            rows += 1;
        }
    }
    xtx.fill_upper_triangle_with_lower_triangle();
    let trace = xtx.trace();
    if rows < w || !(trace > 0.0) {
        return Err(Error::SingularDesign);
    }
    let ridge = ridge.unwrap_or(1e-6 * trace / w as f64);
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "ridge strength must be non-negative, got {ridge}"
        )));
    }
    let mut a = xtx.clone();
    for i in 0..w {
        a[(i, i)] += ridge;
    }
    let weights = a.cholesky().ok_or(Error::SingularDesign)?.solve(&xty);
    if !weights.iter().all(|v| v.is_finite()) {
        return Err(Error::SingularDesign);
    }
    // ‖y − Xw‖² = yᵀy − 2wᵀXᵀy + wᵀXᵀXw
    let sse = (yy - 2.0 * weights.dot(&xty) + weights.dot(&(&xtx * &weights))).max(0.0);
    Ok(WindowedReconstructor {
        window: w,
        weights,
        ridge,
        residual: (sse / rows as f64).sqrt(),
    })
}

/// Pointwise optimum at the reconstructed memory.
pub struct WindowedPolicy {
    pub reconstructor: WindowedReconstructor,
    pub cost: QuadCostSpec,
}

impl MetaPolicy for WindowedPolicy {
    fn act(&self, trace: &[MemorySample], i: usize) -> Option<ParamVector> {
        self.reconstructor
            .predict(trace, i)
            .map(|z| self.cost.optimum(z))
    }
}

/// Mean excess cost with a standard error from per-trace means.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExcessCost {
    pub mean: f64,
    pub std_error: f64,
    pub n_traces: usize,
    pub n_steps: usize,
}

/// `ℓ(policy, z) − ℓ(optimum, z)` averaged over steps `start..` of every
/// trace. Traces are independent, so the error bar is the spread of
/// per-trace means over `√n`.
pub fn excess_cost(
    policy: &dyn MetaPolicy,
    cost: &QuadCostSpec,
    traces: &[Vec<MemorySample>],
    start: usize,
) -> Result<ExcessCost> {
    let mut means = Vec::with_capacity(traces.len());
    let mut steps = 0;
    for tr in traces {
        let (mut s, mut n) = (0.0, 0usize);
        for i in start..tr.len() {
            let Some(theta) = policy.act(tr, i) else {
                return Err(Error::InsufficientHistory {
                    needed: start + 1,
                    available: i,
                    index: i,
                });
            };
            let m = tr[i];
            s += cost.cost(&theta, m.z) - cost.cost(&pointwise_optimum(m.q, m.qd, m.z, cost), m.z);
            n += 1;
        }
        if n > 0 {
            means.push(s / n as f64);
            steps += n;
        }
    }
    if means.len() < 2 {
        return Err(Error::InsufficientSamples(
            "need at least two evaluation traces".into(),
        ));
    }
    let k = means.len() as f64;
    let mean = means.iter().sum::<f64>() / k;
    let var = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (k - 1.0);
    Ok(ExcessCost {
        mean,
        std_error: (var / k).sqrt(),
        n_traces: means.len(),
        n_steps: steps,
    })
}

/// `⌈H_z / dt⌉`, tolerant of ratios that are integers up to roundoff.
pub fn window_lower_bound(horizon: f64, dt: f64) -> Result<usize> {
    if !(horizon > 0.0 && dt > 0.0 && horizon.is_finite() && dt.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "need positive horizon and step, got {horizon}, {dt}"
        )));
    }
    let r = horizon / dt;
    let nearest = r.round();
    Ok(if (r - nearest).abs() <= 1e-9 * nearest.max(1.0) {
        nearest as usize
    } else {
        r.ceil() as usize
    })
}

/// Experiment settings: train/evaluation rollouts under random multisine
/// references, a binned Markovian policy and a windowed reconstructor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MarkovGapConfig {
    pub rollout: RolloutConfig,
    pub multisine: MultisineSpec,
    pub law: LawConfig,
    pub cost: QuadCostSpec,
    pub n_train: usize,
    pub n_eval: usize,
    /// Windows per memory horizon; the window is `⌈factor·τ_z/dt⌉`.
    pub window_factor: f64,
    pub bins: usize,
    pub row_stride: usize,
    pub joint: usize,
}

impl Default for MarkovGapConfig {
    fn default() -> Self {
        Self {
            rollout: RolloutConfig {
                horizon: 10.0,
                ..RolloutConfig::default()
            },
            multisine: MultisineSpec::default(),
            law: LawConfig::default(),
            cost: QuadCostSpec::default(),
            n_train: 400,
            n_eval: 800,
            window_factor: 5.0,
            bins: StateBinning::DEFAULT_BINS,
            row_stride: 5,
            joint: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarkovGapReport {
    pub tau_z: f64,
    pub window: usize,
    /// Binned conditional variance on the evaluation steps.
    pub sigma_z2_mc: f64,
    pub sigma_z2_cf: f64,
    pub excess_markov: ExcessCost,
    pub excess_windowed: ExcessCost,
    pub bound_c1_sigma2: f64,
    pub reconstruction_rmse: f64,
}

/// Train on seeds `seed..seed+n_train`, evaluate on the next `n_eval`.
/// Both policies are scored on the same steps (those with a full window).
pub fn run_markov_gap(
    tau_z: f64,
    plant: &PlantParams,
    fric: &FrictionParams,
    config: &MarkovGapConfig,
    seed: u64,
) -> Result<MarkovGapReport> {
    config.cost.validate()?;
    let fric = fric.with_tau_z(tau_z);
    fric.validate()?;
    let dt = config.rollout.dt;
    let window = window_lower_bound(config.window_factor * tau_z, dt)?;
    let steps = config.rollout.steps()?;
    if window >= steps {
        return Err(Error::InsufficientHistory {
            needed: window + 1,
            available: steps,
            index: steps,
        });
    }
    let sampling = SamplingConfig {
        rollout: config.rollout,
        joint: config.joint,
        ..SamplingConfig::default()
    };
    let spec = config.multisine;
    let collect = |n: usize, s: u64| {
        collect_memory_samples(
            |k| MultisineReference::random(&spec, k),
            plant,
            &fric,
            config.law,
            n,
            s,
            &sampling,
        )
    };
    let train = collect(config.n_train, seed)?;
    let eval = collect(config.n_eval, seed + config.n_train as u64)?;

    let start = window - 1;
    let train_flat: Vec<MemorySample> = train
        .iter()
        .flat_map(|t| t[start..].iter().copied())
        .collect();
    let markov = markovian_policy_fit(&train_flat, &config.cost, config.bins)?;
    let recon = windowed_reconstructor_fit(&train, window, None, start, config.row_stride)?;

    let excess_markov = excess_cost(&markov, &config.cost, &eval, start)?;
    let reconstruction_rmse = recon.rmse(&eval, start)?;
    let windowed = WindowedPolicy {
        reconstructor: recon,
        cost: config.cost,
    };
    let excess_windowed = excess_cost(&windowed, &config.cost, &eval, start)?;

    let eval_flat: Vec<MemorySample> = eval
        .iter()
        .flat_map(|t| t[start..].iter().copied())
        .collect();
    let sigma_z2_mc = binned_conditional_variance(&eval_flat, &markov.binning, 1)?;
    let velocities: Vec<Vec<f64>> = eval
        .iter()
        .map(|t| t.iter().map(|m| m.qd).collect())
        .collect();
    let (var, rho) = velocity_statistics(&velocities, dt, tau_z);
    let sigma_z2_cf = sigma_z_closed_form(tau_z, fric.memory_gain, var, rho)?;

    Ok(MarkovGapReport {
        tau_z,
        window,
        sigma_z2_mc,
        sigma_z2_cf,
        excess_markov,
        excess_windowed,
        bound_c1_sigma2: config.cost.c1() * sigma_z2_mc,
        reconstruction_rmse,
    })
}
