//! Monte Carlo harness: generate, fit each method, estimate, aggregate.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{balance_report, evaluation_bandwidths, evaluation_grid};
use crate::error::{Error, Result};
use crate::estimators::{ate_hajek, ipw_weights, treated_mean};
use crate::simulate::{split_seed, Scenario, SimulatedDataset};
use crate::train::{fit_propensity, preliminary_scores, LossKind, Preset, TrainConfig};

/// Largest tolerated fraction of failed repetitions per method.
pub const MAX_FAILURE_RATE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "true-ps")]
    TruePs,
    #[serde(rename = "logistic")]
    Logistic,
    #[serde(rename = "bce")]
    Bce,
    #[serde(rename = "lbc-net")]
    LbcNet,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::TruePs, Method::Logistic, Method::Bce, Method::LbcNet];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::TruePs => "true-ps",
            Method::Logistic => "logistic",
            Method::Bce => "bce",
            Method::LbcNet => "lbc-net",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::domain(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub lbc: TrainConfig,
    pub bce: TrainConfig,
    /// Evaluation points for the LSD summaries.
    pub lsd_points: usize,
}

impl BenchmarkConfig {
    /// Presets matched to the scenario and sample size.
    pub fn for_scenario(scenario: Scenario, n: usize) -> Self {
        let preset = if !scenario.is_kang_schafer() {
            Preset::Ssmr
        } else if n >= 5000 {
            Preset::Ks5k
        } else {
            Preset::Ks1k
        };
        Self {
            lbc: TrainConfig::with_preset(LossKind::Lbc, preset),
            bce: TrainConfig::with_preset(LossKind::Bce, preset),
            lsd_points: 99,
        }
    }

    /// Overrides the epoch count of both network methods.
    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.lbc.epochs = epochs;
        self.bce.epochs = epochs;
        self
    }
}

/// Aggregate accuracy of a set of estimates against the truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub pct_bias: f64,
    pub rmse: f64,
    /// Population variance (divisor R) so that `rmse^2 = variance + bias^2`.
    pub variance: f64,
}

pub fn compute_metrics(estimates: &[f64], truth: f64) -> Result<Metrics> {
    if estimates.is_empty() {
        return Err(Error::domain("no estimates to summarize"));
    }
    if truth == 0.0 || !truth.is_finite() {
        return Err(Error::domain("percent bias needs a finite nonzero truth"));
    }
    let r = estimates.len() as f64;
    let mean = estimates.iter().sum::<f64>() / r;
    let variance = estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / r;
    let mse = estimates.iter().map(|e| (e - truth).powi(2)).sum::<f64>() / r;
    Ok(Metrics {
        pct_bias: 100.0 * (mean - truth) / truth,
        rmse: mse.sqrt(),
        variance,
    })
}

/// One method on one repetition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepResult {
    pub rep: usize,
    pub seed: u64,
    pub estimate: Option<f64>,
    pub mean_gsd: Option<f64>,
    pub mean_lsd: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkMetrics {
    pub method: Method,
    pub scenario: Scenario,
    /// Successful repetitions.
    pub reps: usize,
    pub failures: usize,
    pub pct_bias: f64,
    pub rmse: f64,
    pub variance: f64,
    pub mean_gsd: f64,
    pub mean_lsd: f64,
    pub per_rep: Vec<RepResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub scenario: Scenario,
    pub n: usize,
    pub reps: usize,
    pub seed: u64,
    pub truth: f64,
    pub config: BenchmarkConfig,
    pub methods: Vec<BenchmarkMetrics>,
    pub warnings: Vec<String>,
}

/// Propensity scores of `method` on a simulated dataset.
pub fn method_scores(method: Method, sim: &SimulatedDataset, config: &BenchmarkConfig, seed: u64) -> Result<Vec<f64>> {
    match method {
        Method::TruePs => Ok(sim.true_propensity.clone()),
        Method::Logistic => Ok(preliminary_scores(&sim.data)?.0),
        Method::Bce | Method::LbcNet => {
            let mut cfg = if method == Method::Bce {
                config.bce.clone()
            } else {
                config.lbc.clone()
            };
            cfg.seed = seed;
            Ok(fit_propensity(&sim.data, &cfg)?.scores)
        }
    }
}

/// The scenario's estimator: weighted treated-arm mean for Kang–Schafer,
/// Hájek contrast otherwise.
pub fn point_estimate(sim: &SimulatedDataset, scores: &[f64]) -> Result<f64> {
    let y = sim
        .data
        .outcome()
        .ok_or_else(|| Error::domain("simulated dataset lacks an outcome"))?;
    let t = sim.data.treatment();
    let w = ipw_weights(scores, t)?;
    if sim.scenario.is_kang_schafer() {
        treated_mean(y, t, &w)
    } else {
        ate_hajek(y, t, &w)
    }
}

fn evaluate_method(
    method: Method,
    sim: &SimulatedDataset,
    config: &BenchmarkConfig,
    rep: usize,
    seed: u64,
) -> RepResult {
    let run = || -> Result<(f64, f64, f64)> {
        let scores = method_scores(method, sim, config, seed)?;
        let estimate = point_estimate(sim, &scores)?;
        let grid = evaluation_grid(config.lsd_points);
        let bw = evaluation_bandwidths(&scores, config.lbc.grid_size, config.lbc.span, &grid)?;
        let report = balance_report(&sim.data, &scores, &grid, &bw)?;
        Ok((estimate, report.summary.mean_gsd, report.summary.mean_lsd))
    };
    match run() {
        Ok((estimate, gsd, lsd)) => RepResult {
            rep,
            seed,
            estimate: Some(estimate),
            mean_gsd: Some(gsd),
            mean_lsd: Some(lsd),
            error: None,
        },
        Err(e) => RepResult {
            rep,
            seed,
            estimate: None,
            mean_gsd: None,
            mean_lsd: None,
            error: Some(format!("{}: {e}", e.code())),
        },
    }
}

fn mean_of(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.filter(|v| v.is_finite()).fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n > 0 {
        s / n as f64
    } else {
        f64::NAN
    }
}

/// Runs `reps` repetitions of `scenario` at sample size `n`. Repetition `r`
/// draws its data from `split_seed(seed, r)` and seeds the networks with the
/// same value.
pub fn run_benchmark(
    scenario: Scenario,
    methods: &[Method],
    reps: usize,
    n: usize,
    seed: u64,
    config: &BenchmarkConfig,
) -> Result<BenchmarkReport> {
    if reps == 0 {
        return Err(Error::domain("need at least one repetition"));
    }
    if methods.is_empty() {
        return Err(Error::domain("no methods selected"));
    }
    config.lbc.validate()?;
    config.bce.validate()?;
    let per_rep: Vec<Vec<RepResult>> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let rep_seed = split_seed(seed, r as u64);
            match scenario.generate(n, rep_seed) {
                Ok(sim) => methods
                    .iter()
                    .map(|&m| evaluate_method(m, &sim, config, r, rep_seed))
                    .collect(),
                Err(e) => methods
                    .iter()
                    .map(|_| RepResult {
                        rep: r,
                        seed: rep_seed,
                        estimate: None,
                        mean_gsd: None,
                        mean_lsd: None,
                        error: Some(format!("{}: {e}", e.code())),
                    })
                    .collect(),
            }
        })
        .collect();

    let truth = scenario.estimand();
    let mut warnings = Vec::new();
    let mut out = Vec::with_capacity(methods.len());
    for (i, &method) in methods.iter().enumerate() {
        let results: Vec<RepResult> = per_rep.iter().map(|r| r[i].clone()).collect();
        let estimates: Vec<f64> = results.iter().filter_map(|r| r.estimate).collect();
        let failures = reps - estimates.len();
        if failures as f64 > MAX_FAILURE_RATE * reps as f64 {
            return Err(Error::Harness(format!(
                "{method}: {failures} of {reps} repetitions failed (first: {})",
                results.iter().find_map(|r| r.error.clone()).unwrap_or_default()
            )));
        }
        if failures > 0 {
            warnings.push(format!("{method}: {failures} of {reps} repetitions failed and were excluded"));
        }
        let m = compute_metrics(&estimates, truth)?;
        out.push(BenchmarkMetrics {
            method,
            scenario,
            reps: estimates.len(),
            failures,
            pct_bias: m.pct_bias,
            rmse: m.rmse,
            variance: m.variance,
            mean_gsd: mean_of(results.iter().filter_map(|r| r.mean_gsd)),
            mean_lsd: mean_of(results.iter().filter_map(|r| r.mean_lsd)),
            per_rep: results,
        });
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(BenchmarkReport {
        scenario,
        n,
        reps,
        seed,
        truth,
        config: config.clone(),
        methods: out,
        warnings,
    })
}

/// Column order of [`metrics_rows`].
pub const METRICS_HEADER: [&str; 10] = [
    "method",
    "scenario",
    "n",
    "reps",
    "failures",
    "pct_bias",
    "rmse",
    "variance",
    "mean_gsd",
    "mean_lsd",
];

/// One CSV row per method.
pub fn metrics_rows(report: &BenchmarkReport) -> Vec<Vec<String>> {
    use crate::io::fmt_f64;
    report
        .methods
        .iter()
        .map(|m| {
            vec![
                m.method.to_string(),
                m.scenario.to_string(),
                report.n.to_string(),
                m.reps.to_string(),
                m.failures.to_string(),
                fmt_f64(m.pct_bias),
                fmt_f64(m.rmse),
                fmt_f64(m.variance),
                fmt_f64(m.mean_gsd),
                fmt_f64(m.mean_lsd),
            ]
        })
        .collect()
}
