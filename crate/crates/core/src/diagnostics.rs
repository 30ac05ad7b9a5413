//! Global and local standardized mean differences and the binned
//! calibration table.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimators::{ipw_weights, kish_ess};
use crate::kernel::{kernel_weight_unchecked, LocalGrid};

/// Number of equal-length bins in a calibration table.
pub const CALIBRATION_BINS: usize = 10;
/// Minimum Kish size per arm for a local difference to be reported.
pub const MIN_LOCAL_ESS: f64 = 2.0;

/// `count` equally spaced points from `1/(count+1)` to `count/(count+1)`;
/// 99 gives 0.01, 0.02, ..., 0.99.
pub fn evaluation_grid(count: usize) -> Vec<f64> {
    (1..=count).map(|i| i as f64 / (count + 1) as f64).collect()
}

/// Weighted mean and variance (divisor `sum W`) of one arm.
fn arm_moments(z: impl Iterator<Item = (f64, f64)> + Clone) -> (f64, f64, f64) {
    let (sw, swz) = z.clone().fold((0.0, 0.0), |(a, b), (x, w)| (a + w, b + w * x));
    let mean = swz / sw;
    let ss: f64 = z.map(|(x, w)| w * (x - mean) * (x - mean)).sum();
    (sw, mean, ss / sw)
}

/// Standardized difference in percent, or `f64::INFINITY` when the pooled
/// variance vanishes but the means differ.
fn standardized_difference(covariate: &[f64], t: &[u8], weights: &[f64]) -> f64 {
    // Shifting by the first value makes a constant column exactly zero.
    let origin = covariate[0];
    let arm = |a: u8| {
        covariate
            .iter()
            .zip(t)
            .zip(weights)
            .filter(move |((_, &ti), _)| ti == a)
            .map(move |((&x, _), &w)| (x - origin, w))
    };
    let (_, m1, v1) = arm_moments(arm(1));
    let (_, m0, v0) = arm_moments(arm(0));
    let pooled = 0.5 * (v1 + v0);
    let diff = (m1 - m0).abs();
    if pooled > 0.0 {
        100.0 * diff / pooled.sqrt()
    } else if diff == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

fn check_inputs(covariate: &[f64], t: &[u8], weights: &[f64]) -> Result<()> {
    if covariate.len() != t.len() || weights.len() != t.len() {
        return Err(Error::domain("covariate, treatment and weight lengths differ"));
    }
    Ok(())
}

/// Global standardized mean difference (percent) with the pooled variance
/// `(v1 + v0) / 2`. Infinite when the pooled variance is zero and the arm
/// means differ.
pub fn gsd(covariate: &[f64], t: &[u8], weights: &[f64]) -> Result<f64> {
    check_inputs(covariate, t, weights)?;
    for a in [1u8, 0] {
        let positive = t.iter().zip(weights).filter(|(&ti, &w)| ti == a && w > 0.0).count();
        if positive < 2 {
            return Err(Error::degenerate(format!(
                "arm T={a} has {positive} subjects with positive weight; need 2"
            )));
        }
    }
    Ok(standardized_difference(covariate, t, weights))
}

/// Local weights `omega(p0, p_i) / [T_i p_i + (1 - T_i)(1 - p_i)]`.
fn local_weights(scores: &[f64], base: &[f64], p0: f64, h: f64) -> Vec<f64> {
    scores
        .iter()
        .zip(base)
        .map(|(&p, &w)| kernel_weight_unchecked(p0, h, p) * w)
        .collect()
}

fn local_ess(t: &[u8], w: &[f64]) -> (f64, f64) {
    let arm = |a: u8| kish_ess(t.iter().zip(w).filter(|(&ti, _)| ti == a).map(|(_, &x)| x));
    (arm(1), arm(0))
}

/// Local standardized mean differences at each `p0`. An entry is `None`
/// when either arm's Kish effective size in that neighbourhood is below 2.
pub fn lsd_curve(
    covariate: &[f64],
    t: &[u8],
    scores: &[f64],
    p0_grid: &[f64],
    bandwidths: &[f64],
) -> Result<Vec<Option<f64>>> {
    check_inputs(covariate, t, scores)?;
    if p0_grid.len() != bandwidths.len() {
        return Err(Error::domain("evaluation grid and bandwidths differ in length"));
    }
    check_evaluation_grid(p0_grid, bandwidths)?;
    let base = ipw_weights(scores, t)?;
    Ok(p0_grid
        .iter()
        .zip(bandwidths)
        .map(|(&p0, &h)| {
            let w = local_weights(scores, &base, p0, h);
            let (m1, m0) = local_ess(t, &w);
            (m1 >= MIN_LOCAL_ESS && m0 >= MIN_LOCAL_ESS).then(|| standardized_difference(covariate, t, &w))
        })
        .collect())
}

fn check_evaluation_grid(p0_grid: &[f64], bandwidths: &[f64]) -> Result<()> {
    if p0_grid.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
        return Err(Error::domain("evaluation points must lie in (0, 1)"));
    }
    if bandwidths.iter().any(|&h| !(h > 0.0) || !h.is_finite()) {
        return Err(Error::domain("bandwidths must be positive"));
    }
    Ok(())
}

/// Bandwidths for the evaluation points: the adaptive rule applied to
/// `scores` on a `grid_size`-point grid, interpolated between centers.
pub fn evaluation_bandwidths(scores: &[f64], grid_size: usize, span: f64, p0_grid: &[f64]) -> Result<Vec<f64>> {
    let grid = LocalGrid::from_scores(grid_size, span, scores)?;
    Ok(p0_grid.iter().map(|&p| grid.interpolate_bandwidth(p)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceSummary {
    pub max_gsd: f64,
    pub mean_gsd: f64,
    /// Over all reported (non-missing) local entries.
    pub max_lsd: f64,
    pub mean_lsd: f64,
}

/// Balance of every non-intercept covariate under one set of scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub covariates: Vec<String>,
    /// Percent; infinite entries are listed in `infinite_imbalance`.
    pub gsd: Vec<f64>,
    pub p0: Vec<f64>,
    pub bandwidths: Vec<f64>,
    /// `lsd[covariate][point]`, percent; `None` marks a sparse neighbourhood.
    pub lsd: Vec<Vec<Option<f64>>>,
    pub ess_treated: f64,
    pub ess_control: f64,
    /// Per evaluation point `(m1, m0)` of the local weights.
    pub local_ess: Vec<(f64, f64)>,
    pub infinite_imbalance: Vec<String>,
    pub summary: BalanceSummary,
}

fn summarize(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut max, mut sum, mut n) = (0.0f64, 0.0, 0usize);
    for v in values.filter(|v| v.is_finite()) {
        max = max.max(v);
        sum += v;
        n += 1;
    }
    (max, if n > 0 { sum / n as f64 } else { f64::NAN })
}

/// Balance report over the covariates of `data` (intercept excluded).
pub fn balance_report(data: &Dataset, scores: &[f64], p0_grid: &[f64], bandwidths: &[f64]) -> Result<BalanceReport> {
    if scores.len() != data.n() {
        return Err(Error::domain("score count does not match subjects"));
    }
    if p0_grid.len() != bandwidths.len() {
        return Err(Error::domain("evaluation grid and bandwidths differ in length"));
    }
    check_evaluation_grid(p0_grid, bandwidths)?;
    let t = data.treatment();
    let base = ipw_weights(scores, t)?;
    let (ess_treated, ess_control) = crate::estimators::effective_sample_size(t, &base)?;
    let local: Vec<Vec<f64>> = p0_grid
        .iter()
        .zip(bandwidths)
        .map(|(&p0, &h)| local_weights(scores, &base, p0, h))
        .collect();
    let local_ess: Vec<(f64, f64)> = local.iter().map(|w| local_ess(t, w)).collect();

    let mut gsd_values = Vec::with_capacity(data.n_covariates());
    let mut lsd = Vec::with_capacity(data.n_covariates());
    let mut infinite_imbalance = Vec::new();
    for (c, name) in data.covariate_names().iter().enumerate() {
        let z: Vec<f64> = data.design().column(c + 1).iter().copied().collect();
        let g = gsd(&z, t, &base)?;
        if g.is_infinite() {
            infinite_imbalance.push(name.clone());
        }
        gsd_values.push(g);
        lsd.push(
            local
                .iter()
                .zip(&local_ess)
                .map(|(w, &(m1, m0))| {
                    (m1 >= MIN_LOCAL_ESS && m0 >= MIN_LOCAL_ESS).then(|| standardized_difference(&z, t, w))
                })
                .collect(),
        );
    }
    let (max_gsd, mean_gsd) = summarize(gsd_values.iter().copied());
    let (max_lsd, mean_lsd) = summarize(lsd.iter().flatten().flatten().copied());
    Ok(BalanceReport {
        covariates: data.covariate_names().to_vec(),
        gsd: gsd_values,
        p0: p0_grid.to_vec(),
        bandwidths: bandwidths.to_vec(),
        lsd,
        ess_treated,
        ess_control,
        local_ess,
        infinite_imbalance,
        summary: BalanceSummary {
            max_gsd,
            mean_gsd,
            max_lsd,
            mean_lsd,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    /// `None` for an empty bin.
    pub mean_score: Option<f64>,
    pub treated_proportion: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTable {
    pub bins: Vec<CalibrationBin>,
}

impl CalibrationTable {
    /// Largest `|mean score - treated proportion|` over populated bins.
    pub fn max_gap(&self) -> f64 {
        self.bins
            .iter()
            .filter_map(|b| Some((b.mean_score? - b.treated_proportion?).abs()))
            .fold(0.0, f64::max)
    }
}

/// Ten bins `[i/10, (i+1)/10)`, the last one closed.
pub fn hosmer_lemeshow_table(scores: &[f64], t: &[u8]) -> Result<CalibrationTable> {
    if scores.len() != t.len() {
        return Err(Error::domain("score and treatment lengths differ"));
    }
    let mut sums = [(0.0, 0.0, 0usize); CALIBRATION_BINS];
    for (&p, &ti) in scores.iter().zip(t) {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::domain(format!("score {p} is outside [0, 1]")));
        }
        let bin = ((p * CALIBRATION_BINS as f64) as usize).min(CALIBRATION_BINS - 1);
        let s = &mut sums[bin];
        s.0 += p;
        s.1 += f64::from(ti);
        s.2 += 1;
    }
    let width = 1.0 / CALIBRATION_BINS as f64;
    let bins = sums
        .iter()
        .enumerate()
        .map(|(i, &(sp, st, count))| {
            let n = count as f64;
            CalibrationBin {
                lower: i as f64 * width,
                upper: (i + 1) as f64 * width,
                mean_score: (count > 0).then(|| sp / n),
                treated_proportion: (count > 0).then(|| st / n),
                count,
            }
        })
        .collect();
    Ok(CalibrationTable { bins })
}
