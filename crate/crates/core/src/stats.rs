//! Rank and mean tests, pooled effect sizes, and comparison of result files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::experiment::{mean_sd, read_result, RunResult};

/// Combined sample size up to which Mann–Whitney p-values are exact.
pub const EXACT_MW_LIMIT: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    pub label: String,
    pub values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
}

impl SampleSet {
    pub fn new(label: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        let label = label.into();
        if values.is_empty() {
            return Err(Error::EmptyGroup(label));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "sample set {label} holds non-finite values"
            )));
        }
        Ok(Self {
            label,
            values,
            seeds: None,
        })
    }

    pub fn mean_sd(&self) -> (f64, f64) {
        mean_sd(&self.values)
    }
}

/// Direction of the alternative for the first sample relative to the second.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Alternative {
    #[default]
    Less,
    Greater,
    TwoSided,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// `U` of the first sample: `R₁ − n₁(n₁+1)/2` with midranks.
    pub u: f64,
    pub p: f64,
    pub exact: bool,
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

fn midranks(a: &[f64], b: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let all: Vec<f64> = a.iter().chain(b).copied().collect();
    let mut order: Vec<usize> = (0..all.len()).collect();
    order.sort_by(|&i, &j| all[i].total_cmp(&all[j]));
    let mut ranks = vec![0.0; all.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && all[order[j + 1]] == all[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        ties.push(j - i + 1);
        i = j + 1;
    }
    (ranks, ties)
}

fn u_of(rank_sum: f64, n1: usize) -> f64 {
    rank_sum - (n1 * (n1 + 1)) as f64 / 2.0
}

fn tail_p(p_less: f64, p_greater: f64, alt: Alternative) -> f64 {
    match alt {
        Alternative::Less => p_less,
        Alternative::Greater => p_greater,
        Alternative::TwoSided => (2.0 * p_less.min(p_greater)).min(1.0),
    }
}

/// Exact p-value by enumerating every assignment of the pooled midranks to
/// the first sample.
pub fn mann_whitney_exact(a: &[f64], b: &[f64], alt: Alternative) -> Result<MannWhitney> {
    let (n1, n2) = (a.len(), b.len());
    if n1 == 0 || n2 == 0 {
        return Err(Error::InsufficientSamples(
            "both samples must be non-empty".into(),
        ));
    }
    let n = n1 + n2;
    if n > 24 {
        return Err(Error::InvalidParameter(format!(
            "exact enumeration limited to 24 pooled values, got {n}"
        )));
    }
    let (ranks, _) = midranks(a, b);
    let u = u_of(ranks[..n1].iter().sum(), n1);
    let eps = 1e-9;
    let (mut le, mut ge, mut total) = (0u64, 0u64, 0u64);
    for mask in 0u32..(1u32 << n) {
        if mask.count_ones() as usize != n1 {
            continue;
        }
        let s: f64 = (0..n)
            .filter(|k| mask >> k & 1 == 1)
            .map(|k| ranks[k])
            .sum();
        let uk = u_of(s, n1);
        total += 1;
        le += (uk <= u + eps) as u64;
        ge += (uk >= u - eps) as u64;
    }
    let p = tail_p(le as f64 / total as f64, ge as f64 / total as f64, alt);
    Ok(MannWhitney { u, p, exact: true })
}

/// Normal approximation with tie-corrected variance and continuity correction.
pub fn mann_whitney_normal(a: &[f64], b: &[f64], alt: Alternative) -> Result<MannWhitney> {
    let (n1, n2) = (a.len(), b.len());
    if n1 == 0 || n2 == 0 {
        return Err(Error::InsufficientSamples(
            "both samples must be non-empty".into(),
        ));
    }
    let (ranks, ties) = midranks(a, b);
    let u = u_of(ranks[..n1].iter().sum(), n1);
    let n = (n1 + n2) as f64;
    let (f1, f2) = (n1 as f64, n2 as f64);
    let tie_term: f64 =
        ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / (n * (n - 1.0)).max(1.0);
    let var = f1 * f2 / 12.0 * ((n + 1.0) - tie_term);
    let mean = f1 * f2 / 2.0;
    if !(var > 0.0) {
        return Ok(MannWhitney {
            u,
            p: 1.0,
            exact: false,
        });
    }
    let sd = var.sqrt();
    let p_less = normal_cdf((u - mean + 0.5) / sd);
    let p_greater = 1.0 - normal_cdf((u - mean - 0.5) / sd);
    Ok(MannWhitney {
        u,
        p: tail_p(p_less, p_greater, alt),
        exact: false,
    })
}

/// Exact up to [`EXACT_MW_LIMIT`] pooled values, normal approximation beyond.
pub fn mann_whitney_u(a: &SampleSet, b: &SampleSet, alt: Alternative) -> Result<MannWhitney> {
    if a.values.len() + b.values.len() <= EXACT_MW_LIMIT {
        mann_whitney_exact(&a.values, &b.values, alt)
    } else {
        mann_whitney_normal(&a.values, &b.values, alt)
    }
}

/// Student-t CDF via the regularised incomplete beta function.
pub fn student_t_cdf(t: f64, nu: f64) -> f64 {
    if t.is_infinite() {
        return if t > 0.0 { 1.0 } else { 0.0 };
    }
    let x = nu / (nu + t * t);
    let tail = 0.5 * beta_reg(nu / 2.0, 0.5, x);
    if t > 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchResult {
    pub t: f64,
    pub df: f64,
    /// Two-sided.
    pub p: f64,
}

pub fn welch_t(a: &SampleSet, b: &SampleSet) -> Result<WelchResult> {
    let (n1, n2) = (a.values.len(), b.values.len());
    if n1 < 2 || n2 < 2 {
        return Err(Error::DegenerateVariance(format!(
            "Welch test needs two values per sample ({}: {n1}, {}: {n2})",
            a.label, b.label
        )));
    }
    let (m1, s1) = a.mean_sd();
    let (m2, s2) = b.mean_sd();
    let (v1, v2) = (s1 * s1 / n1 as f64, s2 * s2 / n2 as f64);
    let se2 = v1 + v2;
    if !(se2 > 0.0) {
        return Err(Error::DegenerateVariance(format!(
            "{} and {} both have zero variance",
            a.label, b.label
        )));
    }
    let t = (m1 - m2) / se2.sqrt();
    let df = se2 * se2 / (v1 * v1 / (n1 as f64 - 1.0) + v2 * v2 / (n2 as f64 - 1.0));
    let p = (2.0 * student_t_cdf(-t.abs(), df)).min(1.0);
    Ok(WelchResult { t, df, p })
}

/// `(m1 − m2) / s_pooled` with the `(n − 1)`-weighted pooled variance.
pub fn cohens_d_pooled(
    mean1: f64,
    sd1: f64,
    n1: usize,
    mean2: f64,
    sd2: f64,
    n2: usize,
) -> Result<f64> {
    if sd1 < 0.0 || sd2 < 0.0 || n1 + n2 < 3 || n1 == 0 || n2 == 0 {
        return Err(Error::InvalidParameter(
            "need non-negative sds and n1 + n2 >= 3".into(),
        ));
    }
    let pooled =
        (((n1 - 1) as f64 * sd1 * sd1 + (n2 - 1) as f64 * sd2 * sd2) / (n1 + n2 - 2) as f64).sqrt();
    if !(pooled > 0.0) {
        return Err(Error::DegenerateVariance(
            "pooled standard deviation is zero".into(),
        ));
    }
    Ok((mean1 - mean2) / pooled)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub label1: String,
    pub label2: String,
    pub n1: usize,
    pub n2: usize,
    pub mean1: f64,
    pub mean2: f64,
    pub sd1: f64,
    pub sd2: f64,
    /// Mann–Whitney p for the chosen alternative.
    pub p_u: f64,
    pub p_u_exact: bool,
    pub welch_t: f64,
    pub welch_df: f64,
    /// Two-sided Welch p.
    pub p_w: f64,
    pub d: f64,
}

pub fn test_report(a: &SampleSet, b: &SampleSet, alt: Alternative) -> Result<TestReport> {
    let w = welch_t(a, b)?;
    let mw = mann_whitney_u(a, b, alt)?;
    let (m1, s1) = a.mean_sd();
    let (m2, s2) = b.mean_sd();
    let d = cohens_d_pooled(m1, s1, a.values.len(), m2, s2, b.values.len())?;
    Ok(TestReport {
        label1: a.label.clone(),
        label2: b.label.clone(),
        n1: a.values.len(),
        n2: b.values.len(),
        mean1: m1,
        mean2: m2,
        sd1: s1,
        sd2: s2,
        p_u: mw.p,
        p_u_exact: mw.exact,
        welch_t: w.t,
        welch_df: w.df,
        p_w: w.p,
        d,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    #[default]
    DeltaPercent,
    RmseMean,
    BaselineRmse,
}

impl Metric {
    pub fn of(self, r: &RunResult) -> f64 {
        match self {
            Metric::DeltaPercent => r.delta_percent,
            Metric::RmseMean => r.rmse_mean(),
            Metric::BaselineRmse => r.baseline_rmse,
        }
    }
}

/// How result files are grouped. Comparisons are made between groups that
/// share a stratum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Grouping {
    /// One group per architecture, all horizons pooled.
    Architecture,
    /// One group per (architecture, memory horizon); compared within a horizon.
    #[default]
    ArchitectureTau,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub stratum: String,
    pub label: String,
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub metric: Metric,
    pub groups: Vec<GroupSummary>,
    pub reports: Vec<TestReport>,
}

pub fn load_results<P: AsRef<Path>>(paths: &[P]) -> Result<Vec<RunResult>> {
    paths.iter().map(|p| read_result(p.as_ref())).collect()
}

/// Group, summarise and compare every pair within each stratum. Groups are
/// ordered by label; pairs follow that order.
pub fn compare_results(
    results: &[RunResult],
    grouping: Grouping,
    metric: Metric,
    alt: Alternative,
) -> Result<ComparisonTable> {
    if results.is_empty() {
        return Err(Error::EmptyGroup("no result files".into()));
    }
    let mut strata: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    for r in results {
        let stratum = match grouping {
            Grouping::Architecture => String::new(),
            Grouping::ArchitectureTau => format!("tz{:?}s", r.tau_z),
        };
        strata
            .entry(stratum)
            .or_default()
            .entry(r.architecture.clone())
            .or_default()
            .push(metric.of(r));
    }
    let mut groups = Vec::new();
    let mut reports = Vec::new();
    for (stratum, by_label) in &strata {
        let sets: Vec<SampleSet> = by_label
            .iter()
            .map(|(l, v)| SampleSet::new(l.clone(), v.clone()))
            .collect::<Result<_>>()?;
        for s in &sets {
            let (mean, sd) = s.mean_sd();
            groups.push(GroupSummary {
                stratum: stratum.clone(),
                label: s.label.clone(),
                n: s.values.len(),
                mean,
                sd,
            });
        }
        for i in 0..sets.len() {
            for j in i + 1..sets.len() {
                reports.push(test_report(&sets[i], &sets[j], alt)?);
            }
        }
    }
    Ok(ComparisonTable {
        metric,
        groups,
        reports,
    })
}

pub fn compare_result_files<P: AsRef<Path>>(
    paths: &[P],
    grouping: Grouping,
    metric: Metric,
    alt: Alternative,
) -> Result<ComparisonTable> {
    compare_results(&load_results(paths)?, grouping, metric, alt)
}

impl ComparisonTable {
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "| stratum | group | n | mean | sd |\n|---|---|---|---|---|"
        );
        for g in &self.groups {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {:.4} | {:.4} |",
                g.stratum, g.label, g.n, g.mean, g.sd
            );
        }
        let _ = writeln!(
            s,
            "\n| group 1 | group 2 | p_U | p_W | d |\n|---|---|---|---|---|"
        );
        for r in &self.reports {
            let _ = writeln!(
                s,
                "| {} | {} | {:.4} | {:.4} | {:.2} |",
                r.label1, r.label2, r.p_u, r.p_w, r.d
            );
        }
        s
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.reports {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}
