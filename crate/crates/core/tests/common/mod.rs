//! Independent reference implementations used by the integration tests.
//! Everything here is written as plain loops over the defining sums.

#![allow(dead_code, clippy::needless_range_loop)]

use lbc_core::data::Dataset;
use lbc_core::kernel::LocalGrid;
use lbc_core::network::NetworkParams;
use lbc_core::objective::{compute_q1_frozen, compute_q2, compute_sigma_k, SigmaMode};
use lbc_core::train::{initial_params, loss_and_gradient, LossKind, TrainConfig};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn phi(x: f64) -> f64 {
    (-(x * x) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub fn omega(c: f64, h: f64, p: f64) -> f64 {
    phi((p - c) / h) / h
}

/// Design row `j` with the leading 1.
pub fn z_row(d: &Dataset, j: usize) -> Vec<f64> {
    (0..d.dim()).map(|a| d.design()[(j, a)]).collect()
}

pub fn d1(d: &Dataset, p: &[f64], c: f64, h: f64) -> Vec<f64> {
    let mut out = vec![0.0; d.dim()];
    for j in 0..d.n() {
        let t = d.treatment()[j] as f64;
        let denom = t * p[j] + (1.0 - t) * (1.0 - p[j]);
        let z = z_row(d, j);
        for a in 0..d.dim() {
            out[a] += omega(c, h, p[j]) * (2.0 * t - 1.0) * z[a] / denom;
        }
    }
    out
}

pub fn sigma(d: &Dataset, p: &[f64], c: f64, h: f64) -> Vec<Vec<f64>> {
    let l = d.dim();
    let mut s = vec![vec![0.0; l]; l];
    for j in 0..d.n() {
        let w = omega(c, h, p[j]);
        let z = z_row(d, j);
        for a in 0..l {
            for b in 0..l {
                s[a][b] += w * w * z[a] * z[b] / (c * (1.0 - c));
            }
        }
    }
    s
}

/// Gauss-Jordan inverse with partial pivoting.
pub fn inverse(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = m.len();
    let mut a: Vec<Vec<f64>> = m
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = row.clone();
            r.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            r
        })
        .collect();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&x, &y| a[x][col].abs().partial_cmp(&a[y][col].abs()).unwrap())
            .unwrap();
        a.swap(col, piv);
        let d = a[col][col];
        for v in a[col].iter_mut() {
            *v /= d;
        }
        for r in 0..n {
            if r != col {
                let f = a[r][col];
                let pivot_row = a[col].clone();
                for (v, pv) in a[r].iter_mut().zip(pivot_row) {
                    *v -= f * pv;
                }
            }
        }
    }
    a.into_iter().map(|r| r[n..].to_vec()).collect()
}

pub fn quad_form(s: &[Vec<f64>], v: &[f64]) -> f64 {
    let inv = inverse(s);
    let mut q = 0.0;
    for a in 0..v.len() {
        for b in 0..v.len() {
            q += v[a] * inv[a][b] * v[b];
        }
    }
    q
}

pub fn q1(d: &Dataset, p: &[f64], grid: &LocalGrid) -> f64 {
    let k = grid.len();
    (0..k)
        .map(|i| {
            let (c, h) = (grid.centers()[i], grid.bandwidths()[i]);
            quad_form(&sigma(d, p, c, h), &d1(d, p, c, h))
        })
        .sum::<f64>()
        / k as f64
}

pub fn d2(d: &Dataset, p: &[f64], c: f64, h: f64) -> f64 {
    let mut s = 0.0;
    for j in 0..d.n() {
        s += omega(c, h, p[j]) * (d.treatment()[j] as f64 - p[j]);
    }
    s / (c * (1.0 - c)).sqrt()
}

pub fn q2(d: &Dataset, p: &[f64], grid: &LocalGrid) -> f64 {
    let k = grid.len();
    let mut total = 0.0;
    for i in 0..k {
        let (c, h) = (grid.centers()[i], grid.bandwidths()[i]);
        let (mut num, mut mass) = (0.0, 0.0);
        for j in 0..d.n() {
            let w = omega(c, h, p[j]);
            let r = d.treatment()[j] as f64 - p[j];
            num += w * r * r;
            mass += w;
        }
        total += num / (c * (1.0 - c) * mass);
    }
    total / k as f64
}

pub fn ipw(p: &[f64], t: &[u8]) -> Vec<f64> {
    p.iter()
        .zip(t)
        .map(|(&p, &t)| if t == 1 { 1.0 / p } else { 1.0 / (1.0 - p) })
        .collect()
}

pub fn hajek(y: &[f64], t: &[u8], w: &[f64]) -> f64 {
    let (mut a1, mut b1, mut a0, mut b0) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..y.len() {
        if t[i] == 1 {
            a1 += w[i] * y[i];
            b1 += w[i];
        } else {
            a0 += w[i] * y[i];
            b0 += w[i];
        }
    }
    a1 / b1 - a0 / b0
}

pub fn ht(y: &[f64], t: &[u8], w: &[f64]) -> f64 {
    let n = y.len() as f64;
    let mut s = 0.0;
    for i in 0..y.len() {
        s += if t[i] == 1 { w[i] * y[i] } else { -w[i] * y[i] };
    }
    s / n
}

pub fn ess(t: &[u8], w: &[f64], arm: u8) -> f64 {
    let (mut s, mut s2) = (0.0, 0.0);
    for i in 0..t.len() {
        if t[i] == arm {
            s += w[i];
            s2 += w[i] * w[i];
        }
    }
    s * s / s2
}

/// Standardized difference with divisor `sum W` and `m1 = m0` pooling.
pub fn smd(z: &[f64], t: &[u8], w: &[f64]) -> f64 {
    let stats = |arm: u8| {
        let (mut sw, mut swz) = (0.0, 0.0);
        for i in 0..z.len() {
            if t[i] == arm {
                sw += w[i];
                swz += w[i] * z[i];
            }
        }
        let mean = swz / sw;
        let mut ss = 0.0;
        for i in 0..z.len() {
            if t[i] == arm {
                ss += w[i] * (z[i] - mean) * (z[i] - mean);
            }
        }
        (mean, ss / sw)
    };
    let (m1, v1) = stats(1);
    let (m0, v0) = stats(0);
    100.0 * (m1 - m0).abs() / ((v1 + v0) / 2.0).sqrt()
}

pub fn lsd(z: &[f64], t: &[u8], p: &[f64], p0: f64, h: f64) -> f64 {
    let base = ipw(p, t);
    let w: Vec<f64> = (0..z.len()).map(|i| omega(p0, h, p[i]) * base[i]).collect();
    smd(z, t, &w)
}

/// A random dataset with `m` covariates, alternating treatment and scores
/// drawn uniformly from `[0.1, 0.9]`.
pub fn random_instance(n: usize, m: usize, seed: u64) -> (Dataset, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = DMatrix::from_fn(n, m, |_, _| rng.random::<f64>() * 4.0 - 2.0);
    let t: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
    let y: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 10.0).collect();
    let names = (1..=m).map(|i| format!("z{i}")).collect();
    let d = Dataset::new(names, &z, t, Some(y)).unwrap();
    let p = (0..n).map(|_| 0.1 + 0.8 * rng.random::<f64>()).collect();
    (d, p)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

/// Central-difference step for the gradient checks.
pub const STEP: f64 = 1e-5;

/// Largest componentwise relative gap between the analytic parameter
/// gradient and central differences on a 10-row, 2-covariate instance. In
/// detached mode the reference is the loss with every `Sigma_k` frozen at
/// the starting scores.
pub fn fd_gradient_error(seed: u64, loss: LossKind, mode: SigmaMode) -> f64 {
    let (data, _) = random_instance(10, 2, seed);
    let config = TrainConfig {
        loss,
        sigma_mode: mode,
        hidden: 3,
        seed,
        lambda: 1.0,
        ..TrainConfig::default()
    };
    let params = initial_params(&data, &config).unwrap();
    let grid = LocalGrid::new(vec![0.25, 0.5, 0.75], vec![0.2, 0.15, 0.2], 0.5).unwrap();
    let (_, analytic) = loss_and_gradient(&params, &data, &grid, &config).unwrap();

    let scores_of = |p: &NetworkParams| {
        let x = p.standardizer.apply(&data.covariates());
        p.forward_cache(&x).unwrap().scores
    };
    let start = scores_of(&params);
    let frozen: Vec<_> = (0..grid.len())
        .map(|k| compute_sigma_k(&data, &start, &grid, k).unwrap())
        .collect();

    let theta = params.flatten();
    let loss_at = |theta: &[f64]| {
        let mut p = params.clone();
        p.unflatten(theta).unwrap();
        match (loss, mode) {
            (LossKind::Lbc, SigmaMode::Detached) => {
                let s = scores_of(&p);
                compute_q1_frozen(&data, &s, &grid, &frozen).unwrap()
                    + config.lambda * compute_q2(&data, &s, &grid).unwrap()
            }
            _ => loss_and_gradient(&p, &data, &grid, &config).unwrap().0.loss,
        }
    };
    let numeric: Vec<f64> = (0..theta.len())
        .map(|i| {
            let mut up = theta.clone();
            let mut down = theta.clone();
            up[i] += STEP;
            down[i] -= STEP;
            (loss_at(&up) - loss_at(&down)) / (2.0 * STEP)
        })
        .collect();

    // components that vanish identically (e.g. biases absorbed by batch
    // normalization) are compared against the gradient's overall scale
    let scale = numeric.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, f)| (a - f).abs() / a.abs().max(f.abs()).max(1e-6 * scale))
        .fold(0.0, f64::max)
}
