//! Inverse probability weights, Hájek and Horvitz-Thompson contrasts,
//! effective sample sizes and the nonparametric bootstrap.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::simulate::split_seed;

pub const DEFAULT_BOOTSTRAP_REPS: usize = 200;
/// Single-class resamples are redrawn at most this many times.
pub const MAX_REDRAWS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub ate_hajek: f64,
    pub ate_ht: f64,
    pub ess_treated: f64,
    pub ess_control: f64,
    pub bootstrap_se: Option<f64>,
    pub bootstrap_reps: usize,
    /// Training epochs used inside each bootstrap refit, when they differ
    /// from the main fit.
    pub bootstrap_epochs: Option<usize>,
    /// Symmetric truncation quantile applied to the weights, if any.
    pub truncation: Option<f64>,
}

fn check_lengths(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::domain(format!("{what}: lengths {a} and {b} differ")));
    }
    Ok(())
}

/// `W_i = 1 / [T_i p_i + (1 - T_i)(1 - p_i)]`.
pub fn ipw_weights(scores: &[f64], t: &[u8]) -> Result<Vec<f64>> {
    check_lengths(scores.len(), t.len(), "ipw_weights")?;
    scores
        .iter()
        .zip(t)
        .map(|(&p, &ti)| {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::domain(format!("score {p} is outside (0, 1)")));
            }
            Ok(if ti == 1 { 1.0 / p } else { 1.0 / (1.0 - p) })
        })
        .collect()
}

/// Clips weights to their `q` and `1 - q` empirical quantiles.
pub fn truncate_weights(weights: &[f64], q: f64) -> Result<Vec<f64>> {
    if !(q > 0.0 && q < 0.5) {
        return Err(Error::domain(format!("truncation quantile {q} must lie in (0, 0.5)")));
    }
    if weights.is_empty() {
        return Ok(Vec::new());
    }
    let mut sorted = weights.to_vec();
    sorted.sort_by(f64::total_cmp);
    let quantile = |level: f64| {
        // linear interpolation between order statistics
        let pos = level * (sorted.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
    };
    let (lo, hi) = (quantile(q), quantile(1.0 - q));
    Ok(weights.iter().map(|w| w.clamp(lo, hi)).collect())
}

fn arm_sums(y: &[f64], t: &[u8], weights: &[f64]) -> [(f64, f64); 2] {
    let mut sums = [(0.0, 0.0); 2];
    for ((&yi, &ti), &w) in y.iter().zip(t).zip(weights) {
        let s = &mut sums[ti as usize];
        s.0 += w * yi;
        s.1 += w;
    }
    sums
}

/// Hájek contrast: weighted treated mean minus weighted control mean.
pub fn ate_hajek(y: &[f64], t: &[u8], weights: &[f64]) -> Result<f64> {
    check_lengths(y.len(), t.len(), "ate_hajek")?;
    check_lengths(y.len(), weights.len(), "ate_hajek")?;
    let [control, treated] = arm_sums(y, t, weights);
    if !(treated.1 > 0.0) || !(control.1 > 0.0) {
        return Err(Error::degenerate("an arm has zero weight mass"));
    }
    Ok(treated.0 / treated.1 - control.0 / control.1)
}

/// Horvitz-Thompson contrast `N^-1 sum T W Y - N^-1 sum (1 - T) W Y`.
pub fn ate_ht(y: &[f64], t: &[u8], weights: &[f64], n: usize) -> Result<f64> {
    check_lengths(y.len(), t.len(), "ate_ht")?;
    check_lengths(y.len(), weights.len(), "ate_ht")?;
    if n == 0 {
        return Err(Error::domain("N must be positive"));
    }
    let [control, treated] = arm_sums(y, t, weights);
    Ok((treated.0 - control.0) / n as f64)
}

/// Hájek-weighted mean of the treated arm, the Kang-Schafer mean-outcome
/// estimator.
pub fn treated_mean(y: &[f64], t: &[u8], weights: &[f64]) -> Result<f64> {
    check_lengths(y.len(), t.len(), "treated_mean")?;
    check_lengths(y.len(), weights.len(), "treated_mean")?;
    let treated = arm_sums(y, t, weights)[1];
    if !(treated.1 > 0.0) {
        return Err(Error::degenerate("treated arm has zero weight mass"));
    }
    Ok(treated.0 / treated.1)
}

/// Kish effective size `(sum W)^2 / sum W^2` of a weight vector.
pub fn kish_ess(weights: impl IntoIterator<Item = f64>) -> f64 {
    let (s, s2) = weights.into_iter().fold((0.0, 0.0), |(s, s2), w| (s + w, s2 + w * w));
    if s2 > 0.0 {
        s * s / s2
    } else {
        0.0
    }
}

/// Per-arm effective sample sizes `(m1, m0)`.
pub fn effective_sample_size(t: &[u8], weights: &[f64]) -> Result<(f64, f64)> {
    check_lengths(t.len(), weights.len(), "effective_sample_size")?;
    let arm = |a: u8| {
        let w: Vec<f64> = t.iter().zip(weights).filter(|(&ti, _)| ti == a).map(|(_, &w)| w).collect();
        if w.is_empty() {
            Err(Error::degenerate(format!("arm T={a} is empty")))
        } else {
            Ok(kish_ess(w))
        }
    };
    Ok((arm(1)?, arm(0)?))
}

/// Draws `n` indices with replacement, redrawing single-class samples.
fn resample(t: &[u8], rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    let n = t.len();
    for _ in 0..=MAX_REDRAWS {
        let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let treated = rows.iter().filter(|&&r| t[r] == 1).count();
        if treated > 0 && treated < n {
            return Ok(rows);
        }
    }
    Err(Error::degenerate(format!(
        "bootstrap resample had a single treatment class after {MAX_REDRAWS} redraws"
    )))
}

/// Bootstrap standard error of `estimate` over `reps` subject resamples.
///
/// Replicate `b` uses the seed `split_seed(seed, b)` for both its resample
/// and the `estimate` call, so results do not depend on scheduling.
pub fn bootstrap_se<F>(data: &Dataset, estimate: F, reps: usize, seed: u64) -> Result<f64>
where
    F: Fn(&Dataset, u64) -> Result<f64> + Sync,
{
    if reps < 2 {
        return Err(Error::domain("bootstrap needs at least 2 replicates"));
    }
    data.require_both_arms()?;
    let values: Vec<Result<f64>> = (0..reps)
        .into_par_iter()
        .map(|b| {
            let rep_seed = split_seed(seed, b as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(rep_seed);
            let rows = resample(data.treatment(), &mut rng)?;
            estimate(&data.select_rows(&rows), rep_seed)
        })
        .collect();
    let values = values.into_iter().collect::<Result<Vec<f64>>>()?;
    let mean = values.iter().sum::<f64>() / reps as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
    Ok(var.sqrt())
}

/// Point estimates for `data` under fixed `scores`, without a bootstrap.
pub fn estimate_report(data: &Dataset, scores: &[f64], truncation: Option<f64>) -> Result<EstimateReport> {
    let y = data
        .outcome()
        .ok_or_else(|| Error::domain("dataset has no outcome column"))?;
    let t = data.treatment();
    let mut weights = ipw_weights(scores, t)?;
    if let Some(q) = truncation {
        weights = truncate_weights(&weights, q)?;
    }
    let (ess_treated, ess_control) = effective_sample_size(t, &weights)?;
    Ok(EstimateReport {
        ate_hajek: ate_hajek(y, t, &weights)?,
        ate_ht: ate_ht(y, t, &weights, data.n())?,
        ess_treated,
        ess_control,
        bootstrap_se: None,
        bootstrap_reps: 0,
        bootstrap_epochs: None,
        truncation,
    })
}
