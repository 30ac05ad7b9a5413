//! Benchmark data generators: the Kang–Schafer design (four covariates,
//! correct or transformed observation) and the 84-covariate SSMR design.
//!
//! All draws come from a `ChaCha8Rng` seeded with `seed_from_u64(seed)`;
//! normal variates use `rand_distr::StandardNormal` (ziggurat). Outputs are
//! bit-identical for identical `(n, seed, scenario)` within a build.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::logistic::sigmoid;

/// Population mean of the Kang–Schafer outcome.
pub const KS_ESTIMAND: f64 = 210.0;
/// Treatment effect in the SSMR design.
pub const SSMR_ESTIMAND: f64 = 1.0;
pub const SSMR_COVARIATES: usize = 84;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    #[serde(rename = "ks-correct")]
    KsCorrect,
    #[serde(rename = "ks-mis")]
    KsMis,
    #[serde(rename = "ssmr-correct")]
    SsmrCorrect,
    #[serde(rename = "ssmr-mis")]
    SsmrMis,
}

impl Scenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::KsCorrect => "ks-correct",
            Scenario::KsMis => "ks-mis",
            Scenario::SsmrCorrect => "ssmr-correct",
            Scenario::SsmrMis => "ssmr-mis",
        }
    }

    pub fn is_kang_schafer(self) -> bool {
        matches!(self, Scenario::KsCorrect | Scenario::KsMis)
    }

    pub fn misspecified(self) -> bool {
        matches!(self, Scenario::KsMis | Scenario::SsmrMis)
    }

    pub fn estimand(self) -> f64 {
        if self.is_kang_schafer() {
            KS_ESTIMAND
        } else {
            SSMR_ESTIMAND
        }
    }

    pub fn generate(self, n: usize, seed: u64) -> Result<SimulatedDataset> {
        match self {
            Scenario::KsCorrect => ks_generate(n, seed, false),
            Scenario::KsMis => ks_generate(n, seed, true),
            Scenario::SsmrCorrect => ssmr_generate(n, seed, false),
            Scenario::SsmrMis => ssmr_generate(n, seed, true),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ks-correct" => Ok(Scenario::KsCorrect),
            "ks-mis" => Ok(Scenario::KsMis),
            "ssmr-correct" => Ok(Scenario::SsmrCorrect),
            "ssmr-mis" => Ok(Scenario::SsmrMis),
            other => Err(Error::domain(format!("unknown scenario `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedDataset {
    pub data: Dataset,
    pub true_propensity: Vec<f64>,
    pub estimand: f64,
    pub scenario: Scenario,
    pub seed: u64,
}

/// SplitMix64 finalizer applied to `master + (index + 1) * golden`. Used to
/// derive per-repetition and per-replicate seeds from one master seed.
pub fn split_seed(master: u64, index: u64) -> u64 {
    let mut z = master.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn bernoulli(rng: &mut ChaCha8Rng, p: f64) -> u8 {
    u8::from(rng.random::<f64>() < p)
}

fn check_n(n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::domain("need at least two subjects"));
    }
    Ok(())
}

/// Kang–Schafer design. The true propensity follows
/// `logit p = -Z1 + 0.5 Z2 - 0.25 Z3 - 0.1 Z4` and the outcome
/// `Y = 210 + 27.4 Z1 + 13.7 (Z2 + Z3 + Z4) + e`. With `misspecified` the
/// observed covariates are the transforms
/// `X1 = exp(Z1/2)`, `X2 = Z1/(1 + exp(Z1)) + 10`, `X3 = (Z1 Z3/25 + 0.6)^3`,
/// `X4 = (Z2 + Z4 + 20)^2`; the random draws are identical either way.
pub fn ks_generate(n: usize, seed: u64, misspecified: bool) -> Result<SimulatedDataset> {
    check_n(n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut observed = DMatrix::zeros(n, 4);
    let mut treatment = Vec::with_capacity(n);
    let mut outcome = Vec::with_capacity(n);
    let mut propensity = Vec::with_capacity(n);
    for i in 0..n {
        let z: [f64; 4] = std::array::from_fn(|_| normal(&mut rng));
        let p = sigmoid(-z[0] + 0.5 * z[1] - 0.25 * z[2] - 0.1 * z[3]);
        let t = bernoulli(&mut rng, p);
        let eps = normal(&mut rng);
        let y = 210.0 + 27.4 * z[0] + 13.7 * z[1] + 13.7 * z[2] + 13.7 * z[3] + eps;
        let obs = if misspecified {
            [
                (z[0] / 2.0).exp(),
                z[0] / (1.0 + z[0].exp()) + 10.0,
                (z[0] * z[2] / 25.0 + 0.6).powi(3),
                (z[1] + z[3] + 20.0).powi(2),
            ]
        } else {
            z
        };
        for (c, v) in obs.into_iter().enumerate() {
            observed[(i, c)] = v;
        }
        treatment.push(t);
        outcome.push(y);
        propensity.push(p);
    }
    let prefix = if misspecified { "x" } else { "z" };
    let names = (1..=4).map(|c| format!("{prefix}{c}")).collect();
    Ok(SimulatedDataset {
        data: Dataset::new(names, &observed, treatment, Some(outcome))?,
        true_propensity: propensity,
        estimand: KS_ESTIMAND,
        scenario: if misspecified { Scenario::KsMis } else { Scenario::KsCorrect },
        seed,
    })
}

fn sum(z: &[f64], from: usize, to: usize) -> f64 {
    // 1-based inclusive covariate indices
    z[from - 1..to].iter().sum()
}

/// SSMR design with 84 covariates:
///
/// * `Z4 ~ Bern(0.5)`, `Z3 | Z4 ~ Bern(0.6 Z4 + 0.4 (1 - Z4))`
/// * `(Z1, Z2) | Z3, Z4` bivariate normal with mean
///   `(-Z3 + Z4 + 0.5 Z3 Z4, Z3 - Z4 + Z3 Z4)` and covariance
///   `[[1, .5], [.5, 1]]` when `Z3 = 1`, `[[2, .25], [.25, 2]]` otherwise
/// * `Z5..Z44` normal with mean 0, variance 2, pairwise covariance 0.4
///   (one shared factor plus idiosyncratic noise)
/// * `Z45..Z84 ~ Bern(0.5)` independently
///
/// Blocks are mutually independent given `(Z3, Z4)`.
pub fn ssmr_generate(n: usize, seed: u64, misspecified: bool) -> Result<SimulatedDataset> {
    check_n(n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut observed = DMatrix::zeros(n, SSMR_COVARIATES);
    let mut treatment = Vec::with_capacity(n);
    let mut outcome = Vec::with_capacity(n);
    let mut propensity = Vec::with_capacity(n);
    let shared = 0.4f64.sqrt();
    let own = 1.6f64.sqrt();
    let mut z = [0.0; SSMR_COVARIATES];
    for i in 0..n {
        let z4 = f64::from(bernoulli(&mut rng, 0.5));
        let z3 = f64::from(bernoulli(&mut rng, 0.6 * z4 + 0.4 * (1.0 - z4)));
        let m1 = -z3 + z4 + 0.5 * z3 * z4;
        let m2 = z3 - z4 + z3 * z4;
        let (var, cov) = if z3 == 1.0 { (1.0, 0.5) } else { (2.0, 0.25) };
        let a = f64::sqrt(var);
        let b = cov / a;
        let c = (var - b * b).sqrt();
        let (e1, e2) = (normal(&mut rng), normal(&mut rng));
        z[0] = m1 + a * e1;
        z[1] = m2 + b * e1 + c * e2;
        z[2] = z3;
        z[3] = z4;
        let factor = normal(&mut rng);
        for v in &mut z[4..44] {
            *v = shared * factor + own * normal(&mut rng);
        }
        for v in &mut z[44..84] {
            *v = f64::from(bernoulli(&mut rng, 0.5));
        }

        let mut logit = -1.5 + 0.5 * z[0] - 0.75 * z[1] + 2.0 * z[2] - 0.5 * z[3]
            - 0.1 * sum(&z, 5, 14)
            + 0.15 * sum(&z, 15, 24)
            - 0.1 * sum(&z, 45, 54)
            + 0.15 * sum(&z, 55, 64);
        if misspecified {
            logit += 0.2 * z[0] * z[0] + 0.1 * z[0] * z[1] + 0.2 * z[1] * z[1];
        }
        let p = sigmoid(logit);
        let t = bernoulli(&mut rng, p);
        let eps = normal(&mut rng);
        let y = f64::from(t) + 0.5 + z[0] + 0.6 * z[1] + 2.2 * z[2] - 1.2 * z[3] + sum(&z, 5, 14)
            - sum(&z, 25, 34)
            + sum(&z, 45, 54)
            - sum(&z, 65, 74)
            + eps;

        for (col, &v) in z.iter().enumerate() {
            observed[(i, col)] = v;
        }
        treatment.push(t);
        outcome.push(y);
        propensity.push(p);
    }
    let names = (1..=SSMR_COVARIATES).map(|c| format!("z{c}")).collect();
    Ok(SimulatedDataset {
        data: Dataset::new(names, &observed, treatment, Some(outcome))?,
        true_propensity: propensity,
        estimand: SSMR_ESTIMAND,
        scenario: if misspecified { Scenario::SsmrMis } else { Scenario::SsmrCorrect },
        seed,
    })
}
