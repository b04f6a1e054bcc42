//! Incremental rank tracking over the temporal residual operator: growth,
//! pruning, gate smoothing and convergence to a head count.

use std::ops::RangeInclusive;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controller::{baseline_law, LawConfig};
use crate::dynamics::{
    rollout, FrictionParams, PlantParams, ReferenceSpec, RolloutConfig, PAYLOAD_MAX,
};
use crate::error::{Error, Result};
use crate::linalg::leading_eigvec;
use crate::memory_analysis::{
    effective_rank, effective_rank_or_zero, history_gradient_fd_closed_loop, GradientMode,
    OperatorAccumulator, TemporalResidualOperator,
};

/// Matrices with `‖·‖_F` below this fraction of the operator norm count as zero.
const ZERO_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Phase1Config {
    pub window: usize,
    pub n_samples: usize,
    pub gamma_add: f64,
    pub gamma_prune: f64,
    pub n_stable: usize,
    pub max_iterations: usize,
    /// EMA coefficient of the gate; 1 means no memory.
    pub gate_smoothing: f64,
    pub gate_threshold: f64,
}

impl Default for Phase1Config {
    fn default() -> Self {
        Self {
            window: 20,
            n_samples: 2048,
            gamma_add: 0.05,
            gamma_prune: 0.01,
            n_stable: 20,
            max_iterations: 1000,
            gate_smoothing: 0.5,
            gate_threshold: 0.5,
        }
    }
}

impl Phase1Config {
    pub fn validate(&self) -> Result<()> {
        let ok = self.window >= 1
            && self.gamma_add > 0.0
            && self.gamma_prune > 0.0
            && self.gamma_prune < self.gamma_add
            && self.n_stable >= 1
            && self.max_iterations >= 1
            && self.gate_smoothing > 0.0
            && self.gate_smoothing <= 1.0
            && self.gate_threshold > 0.0
            && self.gate_threshold <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(
                "need window >= 1, 0 < gamma_prune < gamma_add, n_stable >= 1, gate coefficients in (0, 1]".into(),
            ))
        }
    }
}

/// Retained directions and the residual they leave behind.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionSet {
    pub directions: Vec<DVector<f64>>,
    /// Rayleigh mass removed with each direction.
    pub masses: Vec<f64>,
    pub residual: DMatrix<f64>,
}

impl DirectionSet {
    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    /// Deflate `u` by its Rayleigh mass and keep it.
    pub fn push(&mut self, u: DVector<f64>) {
        let mass = u.dot(&(&self.residual * &u));
        self.residual.ger(-mass, &u, &u, 1.0);
        symmetrize(&mut self.residual);
        self.directions.push(u);
        self.masses.push(mass);
    }

    /// Drop direction `k` and restore its mass to the residual.
    pub fn remove(&mut self, k: usize) {
        let u = self.directions.remove(k);
        let mass = self.masses.remove(k);
        self.residual.ger(mass, &u, &u, 1.0);
        symmetrize(&mut self.residual);
    }

    /// Residual with direction `k` restored.
    pub fn leave_one_out(&self, k: usize) -> DMatrix<f64> {
        let mut r = self.residual.clone();
        r.ger(
            self.masses[k],
            &self.directions[k],
            &self.directions[k],
            1.0,
        );
        r
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

/// `r_eff(R) − r_eff(R − (uᵀRu) u uᵀ)` with `r_eff(0) := 0`.
pub fn growth_signal(r: &DMatrix<f64>, u: &DVector<f64>) -> f64 {
    let scale = r.norm();
    if scale == 0.0 {
        return 0.0;
    }
    let mut deflated = r.clone();
    deflated.ger(-u.dot(&(r * u)), u, u, 1.0);
    effective_rank_or_zero(r, scale, ZERO_TOL) - effective_rank_or_zero(&deflated, scale, ZERO_TOL)
}

/// `p_k = u_kᵀ R u_k / ‖R‖_F` for each direction.
pub fn prune_scores(directions: &[DVector<f64>], r: &DMatrix<f64>) -> Result<Vec<f64>> {
    let f = r.norm();
    if f == 0.0 {
        return Err(Error::ZeroResidual);
    }
    Ok(directions.iter().map(|u| u.dot(&(r * u)) / f).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Grow,
    Prune,
    Hold,
}

impl Decision {
    fn signal(self) -> f64 {
        match self {
            Decision::Grow => 1.0,
            Decision::Prune => -1.0,
            Decision::Hold => 0.0,
        }
    }
}

/// Exponential moving average of the signed decision, with two-iteration
/// confirmation before anything is enacted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateState {
    pub smoothing: f64,
    pub threshold: f64,
    pub signal: f64,
    pub up_streak: usize,
    pub down_streak: usize,
}

impl GateState {
    pub fn new(smoothing: f64, threshold: f64) -> Self {
        Self {
            smoothing,
            threshold,
            signal: 0.0,
            up_streak: 0,
            down_streak: 0,
        }
    }
}

pub fn gate_update(raw: Decision, gate: GateState) -> (Decision, GateState) {
    let mut g = gate;
    g.signal = (1.0 - g.smoothing) * g.signal + g.smoothing * raw.signal();
    if g.signal >= g.threshold {
        g.up_streak += 1;
    } else {
        g.up_streak = 0;
    }
    if g.signal <= -g.threshold {
        g.down_streak += 1;
    } else {
        g.down_streak = 0;
    }
    let enacted = match raw {
        Decision::Grow if g.up_streak >= 2 => Decision::Grow,
        Decision::Prune if g.down_streak >= 2 => Decision::Prune,
        _ => Decision::Hold,
    };
    (enacted, g)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    /// Head count after this iteration.
    pub k: usize,
    pub growth_signal: f64,
    pub min_prune_score: f64,
    pub raw: Decision,
    pub enacted: Decision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase1Result {
    pub k_star: usize,
    /// Effective rank of the operator itself.
    pub r_eff: f64,
    pub iterations: usize,
    pub converged: bool,
    pub log: Vec<IterationLog>,
}

/// Grow/prune/gate loop until `K` is unchanged for `n_stable` iterations.
///
/// The first direction is the operator's leading eigenvector, deflated
/// before the loop. Pruning scores each direction against the residual with
/// that direction restored (the score of a deflated direction against the
/// deflated residual is identically zero).
pub fn run_phase1(op: &TemporalResidualOperator, config: &Phase1Config) -> Result<Phase1Result> {
    config.validate()?;
    let a = &op.matrix;
    let w = a.nrows();
    let r_eff = effective_rank(a)?;
    let scale = a.norm();

    let mut set = DirectionSet {
        directions: Vec::new(),
        masses: Vec::new(),
        residual: a.clone(),
    };
    let (u1, _) = leading_eigvec(a)?;
    set.push(u1);

    let mut gate = GateState::new(config.gate_smoothing, config.gate_threshold);
    let mut log = Vec::new();
    let mut stable = 0;
    let mut converged = false;

    for iteration in 1..=config.max_iterations {
        let k = set.len();
        let residual_zero = set.residual.norm() <= ZERO_TOL * scale;

        let (candidate, g) = if residual_zero || k >= w {
            (None, 0.0)
        } else {
            let (u, _) = leading_eigvec(&set.residual)?;
            let g = growth_signal(&set.residual, &u);
            (Some(u), g)
        };
        let grow = candidate.is_some() && g > config.gamma_add;

        let mut min_score = f64::INFINITY;
        let mut argmin = 0;
        for j in 0..k {
            let r = set.leave_one_out(j);
            let p = prune_scores(std::slice::from_ref(&set.directions[j]), &r)
                .map(|v| v[0])
                .unwrap_or(0.0);
            if p < min_score {
                min_score = p;
                argmin = j;
            }
        }
        let prune = k > 1 && min_score < config.gamma_prune;

        let raw = if prune {
            Decision::Prune
        } else if grow {
            Decision::Grow
        } else {
            Decision::Hold
        };
        let (enacted, next_gate) = gate_update(raw, gate);
        gate = next_gate;
        match enacted {
            Decision::Grow => set.push(candidate.expect("grow implies a candidate")),
            Decision::Prune => set.remove(argmin),
            Decision::Hold => {}
        }

        log.push(IterationLog {
            iteration,
            k: set.len(),
            growth_signal: g,
            min_prune_score: min_score,
            raw,
            enacted,
        });

        if set.len() == k {
            stable += 1;
        } else {
            stable = 0;
        }
        if stable >= config.n_stable {
            converged = true;
            break;
        }
    }

    Ok(Phase1Result {
        k_star: set.len(),
        r_eff,
        iterations: log.len(),
        converged,
        log,
    })
}

/// Search interval `[⌈K*/2⌉, K*]` for the downstream grid search.
pub fn phase2_range(k_star: usize) -> RangeInclusive<usize> {
    k_star.div_ceil(2).max(1)..=k_star.max(1)
}

/// How the Phase-1 operator is simulated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Phase1Protocol {
    pub rollout: RolloutConfig,
    pub reference: ReferenceSpec,
    pub law: LawConfig,
    /// Relative half-width of the uniform jitter on the Stribeck constants.
    pub friction_jitter: f64,
    pub randomize_payload: bool,
    /// Finite-difference step on the velocity history.
    pub fd_delta: f64,
    pub joint: usize,
}

impl Default for Phase1Protocol {
    fn default() -> Self {
        Self {
            rollout: RolloutConfig::default(),
            reference: ReferenceSpec::default(),
            law: LawConfig::default(),
            friction_jitter: 0.2,
            randomize_payload: true,
            fd_delta: 1e-4,
            joint: 0,
        }
    }
}

/// Simulate closed-loop history gradients and form the operator.
///
/// Sample `i` uses seed `seed + i`: jittered Stribeck constants, a uniform
/// payload, a baseline rollout, and one uniformly drawn evaluation time.
pub fn simulate_operator(
    tau_z: f64,
    base_plant: &PlantParams,
    base_fric: &FrictionParams,
    config: &Phase1Config,
    protocol: &Phase1Protocol,
    seed: u64,
) -> Result<TemporalResidualOperator> {
    config.validate()?;
    let w = config.window;
    let steps = protocol.rollout.steps()?;
    if steps <= w {
        return Err(Error::InsufficientHistory {
            needed: w + 1,
            available: steps,
            index: steps,
        });
    }
    let acc = (0..config.n_samples as u64)
        .into_par_iter()
        .map(|i| -> Result<OperatorAccumulator> {
            let s = seed.wrapping_add(i);
            let mut rng = ChaCha8Rng::seed_from_u64(s ^ 0x5EED_F00D);
            let j = protocol.friction_jitter;
            let mut jitter = || rng.random_range(1.0 - j..=1.0 + j);
            let mut fric = FrictionParams {
                coulomb: base_fric.coulomb * jitter(),
                static_peak: base_fric.static_peak * jitter(),
                stribeck_velocity: base_fric.stribeck_velocity * jitter(),
                viscous: base_fric.viscous * jitter(),
                ..*base_fric
            };
            fric.static_peak = fric.static_peak.max(fric.coulomb);
            fric.tau_z = tau_z;
            let payload = if protocol.randomize_payload {
                rng.random_range(0.0..=PAYLOAD_MAX)
            } else {
                base_plant.payload
            };
            let plant = base_plant.with_payload(payload);
            let index = rng.random_range(w..steps);

            let mut law = baseline_law(protocol.law);
            let traj = rollout(
                &mut law,
                &protocol.reference,
                &plant,
                &fric,
                s,
                &protocol.rollout,
            )?;
            if traj.diverged || index >= traj.records.len() {
                return Err(Error::Diverged {
                    t: traj.final_state.t,
                    bound: protocol.rollout.blowup_bound,
                });
            }
            let g = history_gradient_fd_closed_loop(
                &mut law,
                &protocol.reference,
                &plant,
                &fric,
                &traj,
                index,
                protocol.joint,
                w,
                protocol.fd_delta,
                &protocol.rollout,
            )?;
            let mut acc = OperatorAccumulator::new(w);
            acc.add(&g);
            Ok(acc)
        })
        .try_reduce(|| OperatorAccumulator::new(w), |a, b| Ok(a.merge(b)))?;
    acc.finish(tau_z, GradientMode::ClosedLoopFd)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn op(m: DMatrix<f64>) -> TemporalResidualOperator {
        TemporalResidualOperator {
            matrix: m,
            n_samples: 1,
            tau_z: 1.0,
            mode: GradientMode::Analytic,
        }
    }

    #[test]
    fn growth_signal_examples() {
        let v = DVector::from_vec(vec![1.0, 2.0, -1.0]);
        let r = &v * v.transpose();
        assert_relative_eq!(growth_signal(&r, &v.normalize()), 1.0, epsilon = 1e-9);

        let e1 = DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0]);
        assert_relative_eq!(
            growth_signal(&DMatrix::identity(4, 4), &e1),
            1.0,
            epsilon = 1e-12
        );

        let r = DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, 2.0, 1.0]));
        let u = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        assert_eq!(growth_signal(&r, &u), 0.0);
    }

    #[test]
    fn prune_score_examples() {
        let w = 9;
        let u = DVector::from_fn(w, |i, _| (i as f64 + 1.0).sqrt()).normalize();
        let s = prune_scores(std::slice::from_ref(&u), &DMatrix::identity(w, w)).unwrap();
        assert_relative_eq!(s[0], 1.0 / (w as f64).sqrt(), epsilon = 1e-12);

        let r = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 2.0, 0.5]));
        let e = DVector::from_vec(vec![0.0, 1.0, 0.0]);
        let a = prune_scores(std::slice::from_ref(&e), &r).unwrap()[0];
        let b = prune_scores(std::slice::from_ref(&e), &(r.clone() * 17.0)).unwrap()[0];
        assert_relative_eq!(a, b, epsilon = 1e-14);

        let mut set = DirectionSet {
            directions: vec![],
            masses: vec![],
            residual: r,
        };
        set.push(e.clone());
        assert!(prune_scores(&set.directions, &set.residual).unwrap()[0].abs() < 1e-15);
        assert!(matches!(
            prune_scores(&[e], &DMatrix::zeros(3, 3)),
            Err(Error::ZeroResidual)
        ));
    }

    #[test]
    fn gate_suppresses_alternation() {
        let mut g = GateState::new(0.5, 0.5);
        for i in 0..50 {
            let raw = if i % 2 == 0 {
                Decision::Grow
            } else {
                Decision::Prune
            };
            let (d, n) = gate_update(raw, g);
            assert_eq!(d, Decision::Hold);
            g = n;
        }
    }

    #[test]
    fn gate_passes_constant_stream_from_second_iteration() {
        let mut g = GateState::new(0.5, 0.5);
        for i in 1..=10 {
            let (d, n) = gate_update(Decision::Grow, g);
            assert_eq!(
                d,
                if i >= 2 {
                    Decision::Grow
                } else {
                    Decision::Hold
                },
                "iteration {i}"
            );
            g = n;
        }
    }

    #[test]
    fn memoryless_gate_needs_two_confirmations() {
        let mut g = GateState::new(1.0, 0.5);
        let stream = [
            Decision::Grow,
            Decision::Prune,
            Decision::Prune,
            Decision::Prune,
            Decision::Grow,
            Decision::Grow,
        ];
        let expected = [
            Decision::Hold,
            Decision::Hold,
            Decision::Prune,
            Decision::Prune,
            Decision::Hold,
            Decision::Grow,
        ];
        for (raw, want) in stream.into_iter().zip(expected) {
            let (d, n) = gate_update(raw, g);
            assert_eq!(d, want);
            g = n;
        }
    }

    #[test]
    fn phase2_ranges() {
        assert_eq!(phase2_range(14), 7..=14);
        assert_eq!(phase2_range(8), 4..=8);
        assert_eq!(phase2_range(1), 1..=1);
        assert_eq!(phase2_range(9), 5..=9);
    }

    #[test]
    fn rank_one_operator_gives_one_head() {
        let v = DVector::from_fn(20, |i, _| (-(i as f64 + 1.0) * 0.01).exp());
        let res = run_phase1(&op(&v * v.transpose()), &Phase1Config::default()).unwrap();
        assert_eq!(res.k_star, 1);
        assert!(res.converged);
        assert_relative_eq!(res.r_eff, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn identity_operator_trace() {
        // Hand trace: every growth removes one unit eigenvalue from a flat
        // residual, so the signal is exactly 1 until the residual has one
        // direction left (signal 1 - 0 = 1 as well, by the zero convention).
        // Leave-one-out prune scores are 1/sqrt(W - K + 1) >= 0.22, never pruned.
        // Gate: grow enacted on every iteration from the second, so K reaches
        // W after W iterations, then holds for n_stable iterations.
        let cfg = Phase1Config::default();
        let res = run_phase1(&op(DMatrix::identity(20, 20)), &cfg).unwrap();
        assert_eq!(res.k_star, 20);
        assert!(res.converged);
        assert_eq!(res.iterations, 20 + cfg.n_stable);
        assert!(res
            .log
            .windows(2)
            .all(|w| (w[1].k as i64 - w[0].k as i64).abs() <= 1));
    }

    #[test]
    fn loop_is_deterministic() {
        let a = DMatrix::from_fn(12, 12, |i, j| (-((i as f64 - j as f64).abs()) / 3.0).exp());
        let x = run_phase1(&op(a.clone()), &Phase1Config::default()).unwrap();
        let y = run_phase1(&op(a), &Phase1Config::default()).unwrap();
        assert_eq!(x, y);
        assert!(x.k_star >= 1 && x.k_star <= 12);
    }

    #[test]
    fn deflation_keeps_residual_psd_and_shrinking() {
        let b = DMatrix::from_fn(10, 10, |i, j| ((i * 3 + j * 5) as f64).sin());
        let a = &b * b.transpose();
        let mut set = DirectionSet {
            directions: vec![],
            masses: vec![],
            residual: a.clone(),
        };
        let mut prev = set.residual.norm();
        for _ in 0..10 {
            let (u, _) = leading_eigvec(&set.residual).unwrap();
            assert!((u.norm() - 1.0).abs() < 1e-10);
            set.push(u);
            let min_eig = set.residual.clone().symmetric_eigen().eigenvalues.min();
            assert!(min_eig >= -1e-8 * a.norm());
            let now = set.residual.norm();
            assert!(now <= prev + 1e-12);
            prev = now;
        }
    }

    #[test]
    fn rejects_bad_config() {
        let c = Phase1Config {
            gamma_prune: 0.1,
            gamma_add: 0.05,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
