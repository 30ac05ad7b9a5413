//! Local balance and local calibration statistics and the objective
//! `Q = Q1 + lambda * Q2`.
//!
//! For grid center `c_k` with bandwidth `h_k` and scores `p_j`:
//!
//! * `D1k = sum_j w_kj V_j`, with `V_j = (2T_j - 1) Z_j / (T_j p_j + (1 - T_j)(1 - p_j))`
//! * `Sigma_k = [c_k (1 - c_k)]^-1 sum_j w_kj^2 Z_j Z_j'`
//! * `Q1 = K^-1 sum_k D1k' Sigma_k^-1 D1k`
//! * `D2k = sum_j w_kj (T_j - p_j) / sqrt(c_k (1 - c_k))`
//! * `Q2 = K^-1 sum_k [sum_j w_kj (T_j - p_j)^2] / [c_k (1 - c_k) sum_j w_kj]`
//!
//! where `w_kj` is the Gaussian kernel weight of `p_j` around `c_k`. `Z`
//! includes the intercept column.
//!
//! Sums run in ascending subject order within a center, and per-center
//! results are reduced in ascending center order, so results are
//! bit-reproducible regardless of the thread pool size.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernel::{kernel_weight, kernel_weight_unchecked, LocalGrid};

/// Neighbourhoods with less kernel mass than this are reported, not smoothed over.
pub const MIN_KERNEL_MASS: f64 = 1e-8;
/// Relative jitter added to a covariance that fails to factor.
pub const JITTER_SCALE: f64 = 1e-6;
/// Each failed retry multiplies the jitter by ten.
pub const JITTER_RETRIES: usize = 10;

/// How the gradient treats the dependence of `Sigma_k` on the scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SigmaMode {
    /// Differentiate through `Sigma_k^-1`.
    #[default]
    Full,
    /// Treat `Sigma_k` as a constant matrix within each evaluation.
    Detached,
}

/// `Q`, `Q1` and `Q2` for one set of scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveValue {
    pub q: f64,
    pub q1: f64,
    pub q2: f64,
}

/// Every per-center statistic behind an objective evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub q1: f64,
    pub q2: f64,
    pub d1: Vec<Vec<f64>>,
    /// Row-major `L x L` matrices.
    pub sigma: Vec<Vec<f64>>,
    pub d2: Vec<f64>,
    pub kernel_mass: Vec<f64>,
}

/// Kernel weight divided by the probability of the received treatment.
pub fn local_ipw_weight(center: f64, bandwidth: f64, p: f64, t: u8) -> Result<f64> {
    check_probability(p)?;
    let w = kernel_weight(center, bandwidth, p)?;
    Ok(w / treatment_probability(p, f64::from(t)))
}

#[inline]
fn treatment_probability(p: f64, t: f64) -> f64 {
    t * p + (1.0 - t) * (1.0 - p)
}

fn check_probability(p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::domain(format!("score {p} is outside (0, 1)")))
    }
}

fn check_inputs(data: &Dataset, scores: &[f64]) -> Result<()> {
    if scores.len() != data.n() {
        return Err(Error::domain(format!(
            "{} scores for {} subjects",
            scores.len(),
            data.n()
        )));
    }
    scores.iter().try_for_each(|&p| check_probability(p))
}

fn check_k(grid: &LocalGrid, k: usize) -> Result<()> {
    if k >= grid.len() {
        return Err(Error::domain(format!("grid index {k} out of range")));
    }
    Ok(())
}

fn kernel_column(grid: &LocalGrid, k: usize, scores: &[f64]) -> Vec<f64> {
    let (c, h) = (grid.centers()[k], grid.bandwidths()[k]);
    scores.iter().map(|&p| kernel_weight_unchecked(c, h, p)).collect()
}

fn d1_from_weights(data: &Dataset, z: &DMatrix<f64>, scores: &[f64], w: &[f64]) -> Vec<f64> {
    let alpha: Vec<f64> = (0..data.n())
        .map(|j| {
            let t = data.t(j);
            w[j] * (2.0 * t - 1.0) / treatment_probability(scores[j], t)
        })
        .collect();
    (0..z.ncols())
        .map(|a| z.column(a).iter().zip(&alpha).map(|(zj, aj)| zj * aj).sum())
        .collect()
}

fn sigma_from_weights(z: &DMatrix<f64>, center: f64, w: &[f64]) -> DMatrix<f64> {
    let l = z.ncols();
    let scale = 1.0 / (center * (1.0 - center));
    let w2: Vec<f64> = w.iter().map(|x| x * x).collect();
    let mut sigma = DMatrix::zeros(l, l);
    for a in 0..l {
        let za = z.column(a);
        let weighted: Vec<f64> = za.iter().zip(&w2).map(|(x, y)| x * y).collect();
        for b in a..l {
            let s: f64 = weighted.iter().zip(z.column(b).iter()).map(|(x, y)| x * y).sum();
            sigma[(a, b)] = s * scale;
            sigma[(b, a)] = s * scale;
        }
    }
    sigma
}

/// The design with every non-intercept column centered and scaled. The
/// quadratic forms `D' Sigma^-1 D` are invariant under this invertible
/// change of basis, and the solve is far better conditioned.
fn conditioned_design(z: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = z.clone();
    let n = z.nrows() as f64;
    for mut col in out.column_iter_mut().skip(1) {
        let mean = col.sum() / n;
        let sd = (col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
        if sd > 0.0 {
            col.apply(|x| *x = (*x - mean) / sd);
        }
    }
    out
}

/// Solves `Sigma u = d` by Cholesky. A matrix that fails to factor gets a
/// diagonal jitter of `JITTER_SCALE * trace / L`, multiplied by ten on each
/// of up to `JITTER_RETRIES` retries. Returns `u` and the jitter used.
pub(crate) fn jittered_solve(sigma: &DMatrix<f64>, d: &[f64], k: usize) -> Result<(DVector<f64>, f64)> {
    let rhs = DVector::from_column_slice(d);
    if let Some(chol) = sigma.clone().cholesky() {
        let u = chol.solve(&rhs);
        if u.iter().all(|x| x.is_finite()) {
            return Ok((u, 0.0));
        }
    }
    let l = sigma.nrows() as f64;
    let base = sigma.trace() / l;
    let mut eps = JITTER_SCALE;
    for _ in 0..JITTER_RETRIES {
        let jitter = eps * base;
        if jitter > 0.0 && jitter.is_finite() {
            let mut m = sigma.clone();
            for i in 0..sigma.nrows() {
                m[(i, i)] += jitter;
            }
            if let Some(chol) = m.cholesky() {
                let u = chol.solve(&rhs);
                if u.iter().all(|x| x.is_finite()) {
                    return Ok((u, jitter));
                }
            }
        }
        eps *= 10.0;
    }
    Err(Error::SolverFailure { k })
}

/// Local balance vector `D1k` (length `L`).
pub fn compute_d1k(data: &Dataset, scores: &[f64], grid: &LocalGrid, k: usize) -> Result<Vec<f64>> {
    check_inputs(data, scores)?;
    check_k(grid, k)?;
    let w = kernel_column(grid, k, scores);
    Ok(d1_from_weights(data, data.design(), scores, &w))
}

/// Scale matrix `Sigma_k` (`L x L`, before any jitter).
pub fn compute_sigma_k(data: &Dataset, scores: &[f64], grid: &LocalGrid, k: usize) -> Result<DMatrix<f64>> {
    check_inputs(data, scores)?;
    check_k(grid, k)?;
    let w = kernel_column(grid, k, scores);
    Ok(sigma_from_weights(data.design(), grid.centers()[k], &w))
}

/// Local calibration statistic `D2k`.
pub fn compute_d2k(data: &Dataset, scores: &[f64], grid: &LocalGrid, k: usize) -> Result<f64> {
    check_inputs(data, scores)?;
    check_k(grid, k)?;
    let c = grid.centers()[k];
    let w = kernel_column(grid, k, scores);
    let s: f64 = (0..data.n()).map(|j| w[j] * (data.t(j) - scores[j])).sum();
    Ok(s / (c * (1.0 - c)).sqrt())
}

/// Averaged local balance quadratic form.
pub fn compute_q1(data: &Dataset, scores: &[f64], grid: &LocalGrid) -> Result<f64> {
    check_inputs(data, scores)?;
    let z = conditioned_design(data.design());
    let terms: Vec<Result<f64>> = (0..grid.len())
        .into_par_iter()
        .map(|k| {
            let w = kernel_column(grid, k, scores);
            let d = d1_from_weights(data, &z, scores, &w);
            let sigma = sigma_from_weights(&z, grid.centers()[k], &w);
            let (u, _) = jittered_solve(&sigma, &d, k)?;
            Ok(u.iter().zip(&d).map(|(a, b)| a * b).sum())
        })
        .collect();
    let mut total = 0.0;
    for t in terms {
        total += t?;
    }
    Ok(total / grid.len() as f64)
}

/// `Q1` with every `Sigma_k` held at a supplied matrix (design basis)
/// instead of being recomputed from `scores`. This is the function whose
/// gradient [`SigmaMode::Detached`] returns.
pub fn compute_q1_frozen(data: &Dataset, scores: &[f64], grid: &LocalGrid, sigmas: &[DMatrix<f64>]) -> Result<f64> {
    check_inputs(data, scores)?;
    if sigmas.len() != grid.len() || sigmas.iter().any(|s| s.shape() != (data.dim(), data.dim())) {
        return Err(Error::domain("one L x L matrix per grid center is required"));
    }
    let mut total = 0.0;
    for (k, sigma) in sigmas.iter().enumerate() {
        let d = compute_d1k(data, scores, grid, k)?;
        let (u, _) = jittered_solve(sigma, &d, k)?;
        total += u.iter().zip(&d).map(|(a, b)| a * b).sum::<f64>();
    }
    Ok(total / grid.len() as f64)
}

fn calibration_ratio(data: &Dataset, scores: &[f64], center: f64, w: &[f64], k: usize) -> Result<(f64, f64)> {
    let mass: f64 = w.iter().sum();
    if !(mass >= MIN_KERNEL_MASS) {
        return Err(Error::DegenerateNeighborhood { k, mass });
    }
    let resid: f64 = (0..data.n())
        .map(|j| {
            let r = data.t(j) - scores[j];
            w[j] * r * r
        })
        .sum();
    Ok((resid / (center * (1.0 - center) * mass), mass))
}

/// Averaged local calibration statistic.
pub fn compute_q2(data: &Dataset, scores: &[f64], grid: &LocalGrid) -> Result<f64> {
    check_inputs(data, scores)?;
    let mut total = 0.0;
    for k in 0..grid.len() {
        let w = kernel_column(grid, k, scores);
        total += calibration_ratio(data, scores, grid.centers()[k], &w, k)?.0;
    }
    Ok(total / grid.len() as f64)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::domain(format!("lambda {lambda} must be a finite nonnegative number")));
    }
    Ok(())
}

/// `Q = Q1 + lambda * Q2` with its components.
pub fn objective(data: &Dataset, scores: &[f64], grid: &LocalGrid, lambda: f64) -> Result<ObjectiveValue> {
    check_lambda(lambda)?;
    let q1 = compute_q1(data, scores, grid)?;
    let q2 = compute_q2(data, scores, grid)?;
    Ok(ObjectiveValue {
        q: q1 + lambda * q2,
        q1,
        q2,
    })
}

/// All per-center statistics in one pass.
pub fn loss_components(data: &Dataset, scores: &[f64], grid: &LocalGrid) -> Result<LossComponents> {
    check_inputs(data, scores)?;
    let k_count = grid.len();
    let z = conditioned_design(data.design());
    let mut out = LossComponents {
        q1: 0.0,
        q2: 0.0,
        d1: Vec::with_capacity(k_count),
        sigma: Vec::with_capacity(k_count),
        d2: Vec::with_capacity(k_count),
        kernel_mass: Vec::with_capacity(k_count),
    };
    for k in 0..k_count {
        let c = grid.centers()[k];
        let w = kernel_column(grid, k, scores);
        let dz = d1_from_weights(data, &z, scores, &w);
        let (u, _) = jittered_solve(&sigma_from_weights(&z, c, &w), &dz, k)?;
        out.q1 += u.iter().zip(&dz).map(|(a, b)| a * b).sum::<f64>();
        let d = d1_from_weights(data, data.design(), scores, &w);
        let sigma = sigma_from_weights(data.design(), c, &w);
        let (ratio, mass) = calibration_ratio(data, scores, c, &w, k)?;
        out.q2 += ratio;
        let d2: f64 = (0..data.n()).map(|j| w[j] * (data.t(j) - scores[j])).sum();
        out.d2.push(d2 / (c * (1.0 - c)).sqrt());
        out.d1.push(d);
        out.sigma.push(sigma.transpose().iter().copied().collect());
        out.kernel_mass.push(mass);
    }
    out.q1 /= k_count as f64;
    out.q2 /= k_count as f64;
    Ok(out)
}

struct CenterTerm {
    q1: f64,
    q2: f64,
    grad: Vec<f64>,
}

/// Per-subject quantities shared by every center.
struct SubjectTerms {
    /// `2T - 1`
    sign: Vec<f64>,
    /// `1 / (T p + (1 - T)(1 - p))`
    inv_prob: Vec<f64>,
    /// `T - p`
    resid: Vec<f64>,
    /// `|Z_j|^2`
    z_sq: Vec<f64>,
    /// `(2T - 1) / a_j`
    signed_inv_prob: DVector<f64>,
    /// Balance basis, see [`conditioned_design`].
    z: DMatrix<f64>,
}

impl SubjectTerms {
    fn new(data: &Dataset, scores: &[f64]) -> Self {
        let n = data.n();
        let z = conditioned_design(data.design());
        let mut z_sq = vec![0.0; n];
        for col in z.column_iter() {
            for (acc, v) in z_sq.iter_mut().zip(col.iter()) {
                *acc += v * v;
            }
        }
        Self {
            sign: (0..n).map(|j| 2.0 * data.t(j) - 1.0).collect(),
            inv_prob: (0..n)
                .map(|j| 1.0 / treatment_probability(scores[j], data.t(j)))
                .collect(),
            resid: (0..n).map(|j| data.t(j) - scores[j]).collect(),
            z_sq,
            signed_inv_prob: DVector::from_fn(n, |j, _| {
                (2.0 * data.t(j) - 1.0) / treatment_probability(scores[j], data.t(j))
            }),
            z,
        }
    }
}

/// Beyond this many bandwidths the Gaussian weight underflows to zero.
const KERNEL_CUTOFF: f64 = 38.7;

#[allow(clippy::too_many_arguments)]
fn center_term(
    data: &Dataset,
    scores: &[f64],
    subjects: &SubjectTerms,
    center: f64,
    bandwidth: f64,
    k: usize,
    lambda: f64,
    mode: SigmaMode,
) -> Result<CenterTerm> {
    let n = data.n();
    let z = &subjects.z;
    let cc = center * (1.0 - center);
    let inv_h = 1.0 / bandwidth;

    let mut w = DVector::zeros(n);
    let mut dw = vec![0.0; n];
    for (j, &p) in scores.iter().enumerate() {
        let u = (p - center) * inv_h;
        if u.abs() < KERNEL_CUTOFF {
            let wj = crate::kernel::gaussian_density(u) * inv_h;
            w[j] = wj;
            // dw/dp = -w (p - c) / h^2
            dw[j] = -wj * u * inv_h;
        }
    }
    let mass = w.sum();
    if !(mass >= MIN_KERNEL_MASS) {
        return Err(Error::DegenerateNeighborhood { k, mass });
    }
    let resid_mass: f64 = w.iter().zip(&subjects.resid).map(|(wj, r)| wj * r * r).sum();
    let v = w.component_mul(&subjects.signed_inv_prob);
    let d = z.tr_mul(&v);
    let mut weighted = z.clone();
    for mut col in weighted.column_iter_mut() {
        col.component_mul_assign(&w);
    }
    let inv_cc = 1.0 / cc;
    let sigma = weighted.tr_mul(&weighted) * inv_cc;

    let (u, jitter) = jittered_solve(&sigma, d.as_slice(), k)?;
    let q1 = u.dot(&d);
    let uz = z * &u;
    let full = mode == SigmaMode::Full;
    let jitter_coef = if jitter > 0.0 && full {
        // jitter = eps * trace / L also moves with the scores
        jitter / sigma.trace() * u.norm_squared()
    } else {
        0.0
    };
    let ratio = resid_mass * inv_cc / mass;
    let ratio_scale = lambda * inv_cc / (mass * mass);

    let mut grad = vec![0.0; n];
    for j in 0..n {
        let (wj, dwj) = (w[j], dw[j]);
        if wj == 0.0 {
            continue;
        }
        let uz = uz[j];
        let ia = subjects.inv_prob[j];
        // dD1k/dp_j = alpha_j Z_j
        let alpha = dwj * subjects.sign[j] * ia - wj * ia * ia;
        let mut g = 2.0 * alpha * uz;
        if full {
            let dsig = 2.0 * wj * dwj * inv_cc;
            g -= dsig * (uz * uz + jitter_coef * subjects.z_sq[j]);
        }
        let r = subjects.resid[j];
        let d_resid = dwj * r * r - 2.0 * wj * r;
        grad[j] = g + ratio_scale * (d_resid * mass - resid_mass * dwj);
    }
    Ok(CenterTerm { q1, q2: ratio, grad })
}

/// Objective value together with `dQ/dp_j` for every subject.
pub fn objective_with_gradient(
    data: &Dataset,
    scores: &[f64],
    grid: &LocalGrid,
    lambda: f64,
    mode: SigmaMode,
) -> Result<(ObjectiveValue, Vec<f64>)> {
    check_lambda(lambda)?;
    check_inputs(data, scores)?;
    let n = data.n();
    let subjects = SubjectTerms::new(data, scores);
    let terms: Vec<Result<CenterTerm>> = (0..grid.len())
        .into_par_iter()
        .map(|k| {
            center_term(
                data,
                scores,
                &subjects,
                grid.centers()[k],
                grid.bandwidths()[k],
                k,
                lambda,
                mode,
            )
        })
        .collect();

    let k_count = grid.len() as f64;
    let mut q1 = 0.0;
    let mut q2 = 0.0;
    let mut grad = vec![0.0; n];
    for term in terms {
        let term = term?;
        q1 += term.q1;
        q2 += term.q2;
        for (g, t) in grad.iter_mut().zip(&term.grad) {
            *g += t;
        }
    }
    q1 /= k_count;
    q2 /= k_count;
    for g in &mut grad {
        *g /= k_count;
    }
    Ok((
        ObjectiveValue {
            q: q1 + lambda * q2,
            q1,
            q2,
        },
        grad,
    ))
}
