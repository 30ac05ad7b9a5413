//! Gaussian kernel, the propensity grid `c_k = k/(K+1)` and adaptive
//! (nearest-neighbour) bandwidths.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bandwidths never drop below this value, so a center that coincides with
/// its neighbours' scores still yields finite kernel weights.
pub const MIN_BANDWIDTH: f64 = 1e-4;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal density.
pub fn gaussian_kernel(x: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::domain(format!("kernel argument {x} is not finite")));
    }
    Ok(gaussian_density(x))
}

#[inline]
pub(crate) fn gaussian_density(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// `h^-1 K((p - c) / h)`.
pub fn kernel_weight(center: f64, bandwidth: f64, p: f64) -> Result<f64> {
    if !(bandwidth > 0.0) || !bandwidth.is_finite() {
        return Err(Error::domain(format!("bandwidth {bandwidth} must be positive")));
    }
    let u = (p - center) / bandwidth;
    Ok(gaussian_kernel(u)? / bandwidth)
}

#[inline]
pub(crate) fn kernel_weight_unchecked(center: f64, bandwidth: f64, p: f64) -> f64 {
    gaussian_density((p - center) / bandwidth) / bandwidth
}

/// Equally spaced centers `{k/(K+1) : k = 1..K}`.
pub fn build_grid(count: usize) -> Result<Vec<f64>> {
    if count == 0 {
        return Err(Error::domain("grid needs at least one center"));
    }
    let denom = (count + 1) as f64;
    Ok((1..=count).map(|k| k as f64 / denom).collect())
}

/// For each center, the distance to its `ceil(span * N)`-th nearest
/// preliminary score, floored at [`MIN_BANDWIDTH`].
pub fn adaptive_bandwidths(prelim_scores: &[f64], centers: &[f64], span: f64) -> Result<Vec<f64>> {
    if prelim_scores.is_empty() {
        return Err(Error::domain("no preliminary scores for bandwidth selection"));
    }
    check_span(span)?;
    if prelim_scores.iter().any(|p| !p.is_finite()) {
        return Err(Error::domain("preliminary scores must be finite"));
    }
    let n = prelim_scores.len();
    let rank = neighbour_count(n, span);
    let mut dist = vec![0.0; n];
    Ok(centers
        .iter()
        .map(|&c| {
            for (d, &p) in dist.iter_mut().zip(prelim_scores) {
                *d = (p - c).abs();
            }
            let (_, kth, _) = dist.select_nth_unstable_by(rank - 1, f64::total_cmp);
            kth.max(MIN_BANDWIDTH)
        })
        .collect())
}

/// `ceil(span * n)` clamped to `1..=n`.
pub fn neighbour_count(n: usize, span: f64) -> usize {
    // the product can land a hair above an integer (0.1 * 100)
    let raw = span * n as f64;
    let rounded = raw.round();
    let count = if (raw - rounded).abs() < 1e-9 { rounded } else { raw.ceil() };
    (count as usize).clamp(1, n)
}

fn check_span(span: f64) -> Result<()> {
    if !(span > 0.0 && span <= 1.0) {
        return Err(Error::domain(format!("span {span} must lie in (0, 1]")));
    }
    Ok(())
}

/// Grid centers with their adaptive bandwidths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalGrid {
    centers: Vec<f64>,
    bandwidths: Vec<f64>,
    span: f64,
}

impl LocalGrid {
    pub fn new(centers: Vec<f64>, bandwidths: Vec<f64>, span: f64) -> Result<Self> {
        check_span(span)?;
        if centers.is_empty() || centers.len() != bandwidths.len() {
            return Err(Error::domain("grid needs matching, nonempty centers and bandwidths"));
        }
        if centers.iter().any(|&c| !(c > 0.0 && c < 1.0)) {
            return Err(Error::domain("grid centers must lie in (0, 1)"));
        }
        if centers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::domain("grid centers must be strictly increasing"));
        }
        if bandwidths.iter().any(|&h| !(h > 0.0) || !h.is_finite()) {
            return Err(Error::domain("bandwidths must be positive"));
        }
        Ok(Self {
            centers,
            bandwidths,
            span,
        })
    }

    /// Equally spaced grid of `count` centers with bandwidths chosen from
    /// preliminary scores.
    pub fn from_scores(count: usize, span: f64, prelim_scores: &[f64]) -> Result<Self> {
        let centers = build_grid(count)?;
        let bandwidths = adaptive_bandwidths(prelim_scores, &centers, span)?;
        Self::new(centers, bandwidths, span)
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn bandwidths(&self) -> &[f64] {
        &self.bandwidths
    }

    pub fn span(&self) -> f64 {
        self.span
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    /// Whether `max 2h_k <= 1/(K+1)`, the neighbourhood-separation condition
    /// of the asymptotic limits for `Q1` and `Q2`. Reported, never enforced.
    pub fn neighbourhoods_disjoint(&self) -> bool {
        let limit = 1.0 / (self.len() + 1) as f64;
        self.bandwidths.iter().all(|&h| 2.0 * h <= limit)
    }

    /// Bandwidth at an arbitrary point by linear interpolation between
    /// centers, constant beyond the first and last center.
    pub fn interpolate_bandwidth(&self, p: f64) -> f64 {
        let c = &self.centers;
        let h = &self.bandwidths;
        if p <= c[0] {
            return h[0];
        }
        if p >= c[c.len() - 1] {
            return h[h.len() - 1];
        }
        let i = c.partition_point(|&x| x <= p);
        let (c0, c1) = (c[i - 1], c[i]);
        let t = (p - c0) / (c1 - c0);
        h[i - 1] + t * (h[i] - h[i - 1])
    }
}
