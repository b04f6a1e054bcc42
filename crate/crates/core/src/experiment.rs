//! Payload sweeps, result files, and the analysis scans behind the CLI.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controller::{baseline_law, LawConfig};
use crate::dynamics::{
    rollout, ControlLaw, FrictionParams, PlantParams, ReferenceSpec, RolloutConfig, PAYLOAD_MAX,
};
use crate::error::{Error, Result};
use crate::incrt::{run_phase1, simulate_operator, Phase1Config, Phase1Protocol, Phase1Result};
use crate::markov_gap::{run_markov_gap, MarkovGapConfig, MarkovGapReport};
use crate::memory_analysis::{sigma_z_closed_form, sigma_z_monte_carlo, SamplingConfig};

pub const PAYLOAD_GRID: [f64; 5] = [0.0, 0.375, 0.75, 1.125, 1.5];
pub const COLLAPSE_THRESHOLD: f64 = 0.02;
pub const BASELINE_ARCHITECTURE: &str = "fixed_gain";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSpec {
    pub tau_z: Vec<f64>,
    pub seeds: Vec<u64>,
    pub rollouts_per_payload: usize,
    pub payloads: Vec<f64>,
    pub rollout: RolloutConfig,
    pub window: usize,
    pub reference: ReferenceSpec,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            tau_z: vec![1.0, 2.0, 5.0],
            seeds: (42..47).collect(),
            rollouts_per_payload: 20,
            payloads: PAYLOAD_GRID.to_vec(),
            rollout: RolloutConfig::default(),
            window: 20,
            reference: ReferenceSpec::default(),
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        self.rollout.steps()?;
        self.reference.validate()?;
        if self.rollouts_per_payload < 2 {
            return Err(Error::InvalidParameter(
                "need at least two rollouts per payload for a spread".into(),
            ));
        }
        if self.payloads.is_empty()
            || self
                .payloads
                .iter()
                .any(|p| !(0.0..=PAYLOAD_MAX).contains(p))
        {
            return Err(Error::InvalidParameter(format!(
                "payloads must be non-empty and within [0, {PAYLOAD_MAX}]"
            )));
        }
        if self.tau_z.iter().any(|t| !(*t > 0.0)) {
            return Err(Error::InvalidParameter(
                "memory horizons must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Rollout seed for `(seed, payload index, rollout index)`; shared by every
    /// controller so comparisons use common initial conditions.
    pub fn rollout_seed(&self, seed: u64, payload: usize, k: usize) -> u64 {
        seed.wrapping_mul(1_000_003)
            .wrapping_add((payload * self.rollouts_per_payload + k) as u64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PayloadRmse {
    pub payload: f64,
    pub rmse: f64,
    /// Between-rollout standard deviation.
    pub sd: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunFlags {
    pub diverged_rollouts: usize,
    pub shield_empty_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub architecture: String,
    pub param_count: usize,
    pub tau_z: f64,
    pub seed: u64,
    pub baseline_rmse: f64,
    pub payload_rmse: Vec<PayloadRmse>,
    pub delta_percent: f64,
    pub flags: RunFlags,
}

impl RunResult {
    pub fn rmse_mean(&self) -> f64 {
        self.payload_rmse.iter().map(|p| p.rmse).sum::<f64>()
            / self.payload_rmse.len().max(1) as f64
    }

    /// `100·(rmse_mean − baseline)/baseline`.
    pub fn recompute_delta(&self) -> f64 {
        100.0 * (self.rmse_mean() - self.baseline_rmse) / self.baseline_rmse
    }

    /// `<arch>__tz<value>s__seed<n>.json`.
    pub fn filename(&self) -> String {
        result_filename(&self.architecture, self.tau_z, self.seed)
    }
}

pub fn result_filename(architecture: &str, tau_z: f64, seed: u64) -> String {
    format!("{architecture}__tz{tau_z:?}s__seed{seed}.json")
}

/// Mean and sample standard deviation.
pub(crate) fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        f64::NAN
    };
    (mean, var.sqrt())
}

/// Sweep a controller over the payload grid for one memory horizon and seed.
///
/// `make` builds a fresh law per rollout. When `baseline_rmse` is `None` the
/// fixed-gain baseline is run on the same rollout seeds to provide it.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_controller<F>(
    make: F,
    architecture: &str,
    param_count: usize,
    tau_z: f64,
    seed: u64,
    spec: &SweepSpec,
    plant: &PlantParams,
    fric: &FrictionParams,
    law_config: LawConfig,
    baseline_rmse: Option<f64>,
) -> Result<RunResult>
where
    F: Fn() -> Box<dyn ControlLaw + Send> + Sync,
{
    spec.validate()?;
    let fric = fric.with_tau_z(tau_z);
    fric.validate()?;
    let (payload_rmse, flags) = sweep(&make, seed, spec, plant, &fric)?;
    let baseline_rmse = match baseline_rmse {
        Some(b) => b,
        None => {
            let base = || Box::new(baseline_law(law_config)) as Box<dyn ControlLaw + Send>;
            let (rows, _) = sweep(&base, seed, spec, plant, &fric)?;
            rows.iter().map(|p| p.rmse).sum::<f64>() / rows.len() as f64
        }
    };
    let mut result = RunResult {
        architecture: architecture.to_string(),
        param_count,
        tau_z,
        seed,
        baseline_rmse,
        payload_rmse,
        delta_percent: 0.0,
        flags,
    };
    result.delta_percent = result.recompute_delta();
    Ok(result)
}

/// The fixed-gain baseline compared with itself.
pub fn evaluate_baseline(
    tau_z: f64,
    seed: u64,
    spec: &SweepSpec,
    plant: &PlantParams,
    fric: &FrictionParams,
    law_config: LawConfig,
) -> Result<RunResult> {
    let make = || Box::new(baseline_law(law_config)) as Box<dyn ControlLaw + Send>;
    let mut r = evaluate_controller(
        make,
        BASELINE_ARCHITECTURE,
        0,
        tau_z,
        seed,
        spec,
        plant,
        fric,
        law_config,
        Some(1.0),
    )?;
    r.baseline_rmse = r.rmse_mean();
    r.delta_percent = r.recompute_delta();
    Ok(r)
}

fn sweep<F>(
    make: &F,
    seed: u64,
    spec: &SweepSpec,
    plant: &PlantParams,
    fric: &FrictionParams,
) -> Result<(Vec<PayloadRmse>, RunFlags)>
where
    F: Fn() -> Box<dyn ControlLaw + Send> + Sync,
{
    let n = spec.rollouts_per_payload;
    let jobs: Vec<(usize, usize)> = (0..spec.payloads.len())
        .flat_map(|p| (0..n).map(move |k| (p, k)))
        .collect();
    // collect preserves job order, so the reduction below is deterministic
    let outcomes: Vec<(f64, bool, usize)> = jobs
        .par_iter()
        .map(|&(p, k)| {
            let mut law = make();
            let plant = plant.with_payload(spec.payloads[p]);
            let traj = rollout(
                law.as_mut(),
                &spec.reference,
                &plant,
                fric,
                spec.rollout_seed(seed, p, k),
                &spec.rollout,
            )?;
            let empty = traj
                .records
                .iter()
                .filter(|r| r.shield.is_some_and(|s| s.empty))
                .count();
            Ok((traj.rmse(), traj.diverged, empty))
        })
        .collect::<Result<_>>()?;
    let mut flags = RunFlags::default();
    let rows = spec
        .payloads
        .iter()
        .enumerate()
        .map(|(p, &payload)| {
            let chunk = &outcomes[p * n..(p + 1) * n];
            for &(_, diverged, empty) in chunk {
                flags.diverged_rollouts += diverged as usize;
                flags.shield_empty_steps += empty;
            }
            let v: Vec<f64> = chunk.iter().map(|o| o.0).collect();
            let (rmse, sd) = mean_sd(&v);
            PayloadRmse { payload, rmse, sd }
        })
        .collect();
    Ok((rows, flags))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FailureMode {
    Healthy,
    Collapsed,
    Diverged,
}

/// Divergence first; then a payload-flat RMSE profile counts as collapse.
pub fn failure_mode_flag(result: &RunResult, collapse_threshold: f64) -> FailureMode {
    if result.flags.diverged_rollouts > 0 || result.payload_rmse.iter().any(|p| !p.rmse.is_finite())
    {
        return FailureMode::Diverged;
    }
    let (lo, hi) = result
        .payload_rmse
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p.rmse), hi.max(p.rmse))
        });
    if hi - lo < collapse_threshold {
        FailureMode::Collapsed
    } else {
        FailureMode::Healthy
    }
}

pub fn write_result(dir: &Path, result: &RunResult) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(result.filename());
    let mut f = fs::File::create(&path)?;
    serde_json::to_writer_pretty(&mut f, result)?;
    writeln!(f)?;
    Ok(path)
}

pub fn read_result(path: &Path) -> Result<RunResult> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::SchemaMismatch {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SigmaScanConfig {
    pub sampling: SamplingConfig,
    pub reference: ReferenceSpec,
    pub law: LawConfig,
    pub n_traj: usize,
}

impl Default for SigmaScanConfig {
    fn default() -> Self {
        Self {
            sampling: SamplingConfig::default(),
            reference: ReferenceSpec::default(),
            law: LawConfig::default(),
            n_traj: 2000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaScanRow {
    pub tau_z: f64,
    pub closed_form: f64,
    pub monte_carlo: f64,
}

/// Closed form (sinusoid velocity statistics of the sampled joint) against
/// the binned Monte-Carlo estimate, per memory horizon.
pub fn sigma_scan(
    taus: &[f64],
    plant: &PlantParams,
    fric: &FrictionParams,
    config: &SigmaScanConfig,
    seed: u64,
) -> Result<Vec<SigmaScanRow>> {
    let j = config.sampling.joint;
    taus.iter()
        .map(|&tau| {
            let f = fric.with_tau_z(tau);
            f.validate()?;
            let reference = config.reference;
            let closed_form = sigma_z_closed_form(
                tau,
                f.memory_gain,
                reference.velocity_variance(j),
                reference.velocity_autocorrelation(j, tau),
            )?;
            let monte_carlo = sigma_z_monte_carlo(
                |_| reference,
                plant,
                &f,
                config.law,
                config.n_traj,
                seed,
                &config.sampling,
            )?;
            Ok(SigmaScanRow {
                tau_z: tau,
                closed_form,
                monte_carlo,
            })
        })
        .collect()
}

pub fn write_sigma_csv<W: Write>(rows: &[SigmaScanRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["tau_z", "closed_form", "monte_carlo"])?;
    for r in rows {
        w.serialize((r.tau_z, r.closed_form, r.monte_carlo))?;
    }
    w.flush()?;
    Ok(())
}

/// One Phase-1 run per memory horizon on a freshly simulated operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase1Record {
    pub tau_z: f64,
    #[serde(rename = "K_star")]
    pub k_star: usize,
    pub r_eff: f64,
    pub iterations: usize,
    pub converged: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub log: Option<Phase1Result>,
}

pub fn phase1_scan(
    taus: &[f64],
    plant: &PlantParams,
    fric: &FrictionParams,
    config: &Phase1Config,
    protocol: &Phase1Protocol,
    seed: u64,
    keep_log: bool,
) -> Result<Vec<Phase1Record>> {
    taus.iter()
        .map(|&tau| {
            let op = simulate_operator(tau, plant, fric, config, protocol, seed)?;
            let r = run_phase1(&op, config)?;
            Ok(Phase1Record {
                tau_z: tau,
                k_star: r.k_star,
                r_eff: r.r_eff,
                iterations: r.iterations,
                converged: r.converged,
                log: keep_log.then_some(r),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankScanRow {
    pub tau_z: f64,
    pub r_eff: f64,
    pub trace: f64,
    /// Second over first eigenvalue.
    pub spectral_gap: f64,
}

/// Effective rank of the simulated operator per memory horizon.
pub fn rank_scan(
    taus: &[f64],
    plant: &PlantParams,
    fric: &FrictionParams,
    config: &Phase1Config,
    protocol: &Phase1Protocol,
    seed: u64,
) -> Result<Vec<RankScanRow>> {
    taus.iter()
        .map(|&tau| {
            let op = simulate_operator(tau, plant, fric, config, protocol, seed)?;
            let (vals, _) = crate::linalg::jacobi_eigen(&op.matrix)?;
            let gap = if vals.len() > 1 && vals[0] > 0.0 {
                vals[1] / vals[0]
            } else {
                0.0
            };
            Ok(RankScanRow {
                tau_z: tau,
                r_eff: op.effective_rank()?,
                trace: op.matrix.trace(),
                spectral_gap: gap,
            })
        })
        .collect()
}

pub fn write_rank_csv<W: Write>(rows: &[RankScanRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["tau_z", "r_eff", "trace", "spectral_gap"])?;
    for r in rows {
        w.serialize((r.tau_z, r.r_eff, r.trace, r.spectral_gap))?;
    }
    w.flush()?;
    Ok(())
}

pub fn markov_gap_scan(
    taus: &[f64],
    plant: &PlantParams,
    fric: &FrictionParams,
    config: &MarkovGapConfig,
    seed: u64,
) -> Result<Vec<MarkovGapReport>> {
    taus.iter()
        .map(|&tau| run_markov_gap(tau, plant, fric, config, seed))
        .collect()
}

pub fn write_markov_gap_csv<W: Write>(rows: &[MarkovGapReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "tau_z",
        "sigma_z2_mc",
        "sigma_z2_cf",
        "excess_markov",
        "excess_markov_se",
        "window",
        "excess_windowed",
        "excess_windowed_se",
        "bound_c1_sigma2",
    ])?;
    for r in rows {
        w.serialize((
            r.tau_z,
            r.sigma_z2_mc,
            r.sigma_z2_cf,
            r.excess_markov.mean,
            r.excess_markov.std_error,
            r.window,
            r.excess_windowed.mean,
            r.excess_windowed.std_error,
            r.bound_c1_sigma2,
        ))?;
    }
    w.flush()?;
    Ok(())
}
