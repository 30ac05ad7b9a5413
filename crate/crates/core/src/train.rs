//! Full-batch ADAM training of the propensity network under either the
//! local balance/calibration objective or binary cross-entropy.

use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::adam::AdamState;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernel::LocalGrid;
use crate::logistic::{fit_logistic, predict_proba};
use crate::network::{init_params, Architecture, ForwardCache, NetworkParams, Standardizer};
use crate::objective::{objective_with_gradient, SigmaMode};
use crate::simulate::split_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Local balance + local calibration objective.
    Lbc,
    /// Binary cross-entropy.
    Bce,
}

impl FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lbc" => Ok(LossKind::Lbc),
            "bce" => Ok(LossKind::Bce),
            other => Err(Error::domain(format!("unknown loss `{other}` (expected lbc or bce)"))),
        }
    }
}

/// Named hyperparameter sets (learning rate, hidden width) per dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "ks-1k")]
    Ks1k,
    #[serde(rename = "ks-5k")]
    Ks5k,
    #[serde(rename = "ssmr")]
    Ssmr,
    #[serde(rename = "eqls")]
    Eqls,
}

impl Preset {
    /// `(learning rate, hidden units)`.
    pub fn hyperparameters(self, loss: LossKind) -> (f64, usize) {
        match (loss, self) {
            (LossKind::Lbc, Preset::Ks1k | Preset::Ks5k) => (0.005, 10),
            (LossKind::Lbc, Preset::Ssmr) => (0.005, 100),
            (LossKind::Lbc, Preset::Eqls) => (0.001, 100),
            (LossKind::Bce, Preset::Ks1k | Preset::Ks5k) => (0.005, 5),
            (LossKind::Bce, Preset::Ssmr) => (0.001, 10),
            (LossKind::Bce, Preset::Eqls) => (0.001, 10),
        }
    }
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ks-1k" => Ok(Preset::Ks1k),
            "ks-5k" => Ok(Preset::Ks5k),
            "ssmr" => Ok(Preset::Ssmr),
            "eqls" => Ok(Preset::Eqls),
            other => Err(Error::domain(format!("unknown preset `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub lambda: f64,
    pub grid_size: usize,
    pub span: f64,
    pub seed: u64,
    pub loss: LossKind,
    pub sigma_mode: SigmaMode,
    pub hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.005,
            epochs: 20_000,
            lambda: 1.0,
            grid_size: 19,
            span: 0.1,
            seed: 0,
            loss: LossKind::Lbc,
            sigma_mode: SigmaMode::Full,
            hidden: 10,
        }
    }
}

impl TrainConfig {
    pub fn with_preset(loss: LossKind, preset: Preset) -> Self {
        let (learning_rate, hidden) = preset.hyperparameters(loss);
        Self {
            learning_rate,
            hidden,
            loss,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::domain("learning rate must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::domain("epochs must be at least 1"));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::domain("lambda must be nonnegative"));
        }
        if self.grid_size == 0 {
            return Err(Error::domain("grid size must be at least 1"));
        }
        if !(self.span > 0.0 && self.span <= 1.0) {
            return Err(Error::domain("span must lie in (0, 1]"));
        }
        if self.hidden == 0 {
            return Err(Error::domain("hidden width must be positive"));
        }
        Ok(())
    }
}

/// Loss value and, for the balance objective, its components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub loss: f64,
    pub q1: Option<f64>,
    pub q2: Option<f64>,
}

/// Per-epoch loss trace, stored column-wise. `q1`/`q2` are empty for BCE.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub loss: Vec<f64>,
    pub q1: Vec<f64>,
    pub q2: Vec<f64>,
}

impl LossTrace {
    pub fn len(&self) -> usize {
        self.loss.len()
    }

    pub fn is_empty(&self) -> bool {
        self.loss.is_empty()
    }

    fn push(&mut self, v: LossValue) {
        self.loss.push(v.loss);
        if let (Some(q1), Some(q2)) = (v.q1, v.q2) {
            self.q1.push(q1);
            self.q2.push(q2);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityFit {
    pub config: TrainConfig,
    pub params: NetworkParams,
    /// Evaluation-mode scores, clamped into `[1e-6, 1 - 1e-6]`.
    pub scores: Vec<f64>,
    pub trace: LossTrace,
    pub grid: LocalGrid,
    pub warnings: Vec<String>,
}

/// Cross-entropy and its derivative with respect to each score.
fn bce_with_gradient(t: &[u8], scores: &[f64]) -> (f64, Vec<f64>) {
    let n = scores.len() as f64;
    let mut loss = 0.0;
    let grad = t
        .iter()
        .zip(scores)
        .map(|(&ti, &p)| {
            if ti == 1 {
                loss -= p.ln();
                -1.0 / (n * p)
            } else {
                loss -= (1.0 - p).ln();
                1.0 / (n * (1.0 - p))
            }
        })
        .collect();
    (loss / n, grad)
}

/// Binary cross-entropy `-N^-1 sum [T log p + (1 - T) log(1 - p)]`.
pub fn bce_loss(t: &[u8], scores: &[f64]) -> f64 {
    bce_with_gradient(t, scores).0
}

fn evaluate(
    params: &NetworkParams,
    x: &DMatrix<f64>,
    data: &Dataset,
    grid: &LocalGrid,
    config: &TrainConfig,
) -> Result<(LossValue, Vec<f64>, ForwardCache)> {
    let cache = params.forward_cache(x)?;
    let (value, d_scores) = match config.loss {
        LossKind::Lbc => {
            let (obj, g) = objective_with_gradient(data, &cache.scores, grid, config.lambda, config.sigma_mode)?;
            (
                LossValue {
                    loss: obj.q,
                    q1: Some(obj.q1),
                    q2: Some(obj.q2),
                },
                g,
            )
        }
        LossKind::Bce => {
            let (loss, g) = bce_with_gradient(data.treatment(), &cache.scores);
            (LossValue { loss, q1: None, q2: None }, g)
        }
    };
    if !value.loss.is_finite() {
        return Err(Error::Numeric(format!("loss evaluated to {}", value.loss)));
    }
    let grad = params.backward(&cache, &d_scores);
    Ok((value, grad, cache))
}

/// Training-mode loss and its exact gradient with respect to
/// [`NetworkParams::flatten`]. Does not touch running statistics.
pub fn loss_and_gradient(
    params: &NetworkParams,
    data: &Dataset,
    grid: &LocalGrid,
    config: &TrainConfig,
) -> Result<(LossValue, Vec<f64>)> {
    if data.n_covariates() != params.architecture.input_dim {
        return Err(Error::domain("dataset covariates do not match the network input"));
    }
    let x = params.standardizer.apply(&data.covariates());
    let (v, g, _) = evaluate(params, &x, data, grid, config)?;
    Ok((v, g))
}

/// Initial scores outside `[INIT_SCORE_BOUND, 1 - INIT_SCORE_BOUND]` reject a draw.
pub const INIT_SCORE_BOUND: f64 = 1e-3;
/// Draws examined before settling for the least extreme one.
pub const INIT_DRAWS: u64 = 64;

/// Distance of the most extreme training-mode score from {0, 1}.
fn initial_margin(params: &NetworkParams, x: &DMatrix<f64>) -> Result<f64> {
    let cache = params.forward_cache(x)?;
    Ok(cache.scores.iter().fold(0.5_f64, |m, &p| m.min(p).min(1.0 - p)))
}

/// Initial parameters for `data`: seeded weights plus a standardizer fitted
/// to the covariates.
///
/// A draw that puts any subject's training-mode score within
/// [`INIT_SCORE_BOUND`] of 0 or 1 is replaced by the next draw in the seed's
/// stream; saturated subjects inflate ADAM's second moment and stall training.
pub fn initial_params(data: &Dataset, config: &TrainConfig) -> Result<NetworkParams> {
    let arch = Architecture::new(data.n_covariates(), config.hidden)?;
    let standardizer = Standardizer::fit(&data.covariates());
    let x = standardizer.apply(&data.covariates());
    let mut best: Option<(f64, NetworkParams)> = None;
    for draw in 0..INIT_DRAWS {
        let seed = if draw == 0 { config.seed } else { split_seed(config.seed, draw - 1) };
        let mut params = init_params(seed, arch)?;
        params.standardizer = standardizer.clone();
        if data.n() < 2 {
            return Ok(params);
        }
        let margin = initial_margin(&params, &x)?;
        if margin >= INIT_SCORE_BOUND {
            return Ok(params);
        }
        if best.as_ref().is_none_or(|(m, _)| margin > *m) {
            best = Some((margin, params));
        }
    }
    Ok(best.expect("at least one draw").1)
}

/// Trains the network for `config.epochs` full-batch ADAM steps.
pub fn train(data: &Dataset, grid: &LocalGrid, config: &TrainConfig) -> Result<PropensityFit> {
    config.validate()?;
    data.require_both_arms()?;
    let mut params = initial_params(data, config)?;
    let x = params.standardizer.apply(&data.covariates());
    let mut theta = params.flatten();
    let mut adam = AdamState::new(theta.len());
    let mut trace = LossTrace::default();

    for epoch in 0..config.epochs {
        let wrap = |e: Error| Error::Training {
            epoch,
            source: Box::new(e),
        };
        let (value, grad, cache) = evaluate(&params, &x, data, grid, config).map_err(wrap)?;
        params.update_running(&cache);
        adam.step(&mut theta, &grad, config.learning_rate).map_err(wrap)?;
        params.unflatten(&theta)?;
        trace.push(value);
    }

    let scores = params.predict(&data.covariates())?;
    let mut warnings = Vec::new();
    if !grid.neighbourhoods_disjoint() {
        warnings.push(format!(
            "neighbourhoods overlap: max 2h_k = {:.4} exceeds 1/(K+1) = {:.4}",
            2.0 * grid.bandwidths().iter().cloned().fold(0.0, f64::max),
            1.0 / (grid.len() + 1) as f64
        ));
    }
    Ok(PropensityFit {
        config: config.clone(),
        params,
        scores,
        trace,
        grid: grid.clone(),
        warnings,
    })
}

/// Preliminary scores from a main-effects logistic regression, together
/// with the fitted model's convergence flag.
pub fn preliminary_scores(data: &Dataset) -> Result<(Vec<f64>, bool)> {
    let model = fit_logistic(data.design(), data.treatment())?;
    Ok((predict_proba(&model, data.design())?, model.converged))
}

/// Builds the grid from logistic preliminary scores, then trains.
pub fn fit_propensity(data: &Dataset, config: &TrainConfig) -> Result<PropensityFit> {
    config.validate()?;
    let (prelim, converged) = preliminary_scores(data)?;
    let grid = LocalGrid::from_scores(config.grid_size, config.span, &prelim)?;
    let mut fit = train(data, &grid, config)?;
    if !converged {
        fit.warnings
            .push("preliminary logistic regression did not converge".to_string());
    }
    Ok(fit)
}
