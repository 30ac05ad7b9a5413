//! Main-effects logistic regression fitted by iteratively reweighted least
//! squares. Serves as the "Logistic" comparator and supplies the preliminary
//! scores used for bandwidth selection.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAX_ITERATIONS: usize = 100;
const SCORE_TOLERANCE: f64 = 1e-8;
const LIKELIHOOD_CLAMP: f64 = 1e-12;
const PREDICT_CLAMP: f64 = 1e-15;
const MAX_HALVINGS: usize = 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    /// Intercept first, then one coefficient per covariate.
    pub coefficients: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub deviance: f64,
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn deviance(t: &[u8], eta: &DVector<f64>) -> f64 {
    let mut dev = 0.0;
    for (j, &tj) in t.iter().enumerate() {
        let p = sigmoid(eta[j]).clamp(LIKELIHOOD_CLAMP, 1.0 - LIKELIHOOD_CLAMP);
        dev -= if tj == 1 { p.ln() } else { (1.0 - p).ln() };
    }
    2.0 * dev
}

/// Fits `logit P(T=1|Z) = Z beta` by Newton / IRLS with step halving.
///
/// `design` must already contain the intercept column.
pub fn fit_logistic(design: &DMatrix<f64>, t: &[u8]) -> Result<LogisticModel> {
    let (n, l) = design.shape();
    if t.len() != n {
        return Err(Error::domain("treatment length does not match design rows"));
    }
    if n < l {
        return Err(Error::domain(format!("need at least {l} rows, got {n}")));
    }
    let n1 = t.iter().filter(|&&v| v == 1).count();
    if n1 == 0 || n1 == n {
        return Err(Error::degenerate("treatment vector contains a single class"));
    }
    let y = DVector::from_iterator(n, t.iter().map(|&v| f64::from(v)));

    let mut beta = DVector::zeros(l);
    let mut eta = design * &beta;
    let mut dev = deviance(t, &eta);
    let mut converged = false;
    let mut iterations = 0;

    while iterations < MAX_ITERATIONS {
        let p = eta.map(sigmoid);
        let score = design.tr_mul(&(&y - &p));
        if score.amax() < SCORE_TOLERANCE {
            // a vanishing score with saturated probabilities means separation
            let saturated = p
                .iter()
                .any(|pi| !(LIKELIHOOD_CLAMP..=1.0 - LIKELIHOOD_CLAMP).contains(pi));
            converged = !saturated;
            break;
        }
        iterations += 1;
        let w = p.map(|pi| (pi * (1.0 - pi)).max(f64::MIN_POSITIVE));
        let mut info = DMatrix::zeros(l, l);
        for a in 0..l {
            for b in a..l {
                let s: f64 = (0..n).map(|j| w[j] * design[(j, a)] * design[(j, b)]).sum();
                info[(a, b)] = s;
                info[(b, a)] = s;
            }
        }
        let Some(chol) = info.cholesky() else {
            log::warn!("logistic information matrix is singular at iteration {iterations}");
            break;
        };
        let step = chol.solve(&score);
        if step.iter().any(|s| !s.is_finite()) {
            break;
        }

        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            let candidate = &beta + &step * scale;
            let cand_eta = design * &candidate;
            let cand_dev = deviance(t, &cand_eta);
            if cand_dev.is_finite() && cand_dev <= dev * (1.0 + 1e-12) + 1e-300 {
                beta = candidate;
                eta = cand_eta;
                dev = cand_dev;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if !converged {
        log::warn!(
            "logistic regression did not converge after {iterations} iterations (possible separation)"
        );
    }
    Ok(LogisticModel {
        coefficients: beta.iter().copied().collect(),
        converged,
        iterations,
        deviance: dev.max(0.0),
    })
}

/// `sigmoid(Z beta)`, clamped into the open unit interval.
pub fn predict_proba(model: &LogisticModel, design: &DMatrix<f64>) -> Result<Vec<f64>> {
    if design.ncols() != model.coefficients.len() {
        return Err(Error::domain(format!(
            "design has {} columns, model expects {}",
            design.ncols(),
            model.coefficients.len()
        )));
    }
    Ok(design
        .row_iter()
        .map(|row| {
            let eta: f64 = row.iter().zip(&model.coefficients).map(|(z, b)| z * b).sum();
            sigmoid(eta).clamp(PREDICT_CLAMP, 1.0 - PREDICT_CLAMP)
        })
        .collect())
}
