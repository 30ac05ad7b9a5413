//! The three-layer propensity network.
//!
//! ```text
//! x  = standardize(z)
//! r1 = relu(bn1(W1 x + b1))
//! h2 = relu(bn2(W2 r1 + b2)) + r1          (residual connection)
//! p  = sigmoid(bn3(W3 h2 + b3))
//! ```
//!
//! Batch normalization uses batch statistics in training mode and running
//! statistics in evaluation mode. Gradients are computed by hand in
//! [`NetworkParams::backward`].

use nalgebra::{DMatrix, DMatrixView};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::logistic::sigmoid;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Fitted scores are clamped to `[SCORE_CLAMP, 1 - SCORE_CLAMP]` before weighting.
pub const SCORE_CLAMP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    /// Number of covariates `M` fed to the network (no intercept).
    pub input_dim: usize,
    /// Common width `H` of both hidden layers.
    pub hidden: usize,
}

impl Architecture {
    pub fn new(input_dim: usize, hidden: usize) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::domain("network needs at least one input"));
        }
        if hidden == 0 {
            return Err(Error::domain("hidden width must be positive"));
        }
        Ok(Self { input_dim, hidden })
    }

    fn layer_shapes(&self) -> [(usize, usize); 3] {
        [
            (self.input_dim, self.hidden),
            (self.hidden, self.hidden),
            (self.hidden, 1),
        ]
    }

    /// Total number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.layer_shapes()
            .iter()
            .map(|&(i, o)| i * o + 3 * o)
            .sum()
    }
}

/// Per-covariate centering and scaling applied to network inputs only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            sd: vec![1.0; dim],
        }
    }

    /// Column means and (population) standard deviations. A column with zero
    /// spread keeps unit scale.
    pub fn fit(z: &DMatrix<f64>) -> Self {
        let n = z.nrows() as f64;
        let mut mean = Vec::with_capacity(z.ncols());
        let mut sd = Vec::with_capacity(z.ncols());
        for col in z.column_iter() {
            let m = col.sum() / n;
            let v = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
            mean.push(m);
            sd.push(if v > 0.0 { v.sqrt() } else { 1.0 });
        }
        Self { mean, sd }
    }

    pub fn apply(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = z.clone();
        for (c, mut col) in x.column_iter_mut().enumerate() {
            let (m, s) = (self.mean[c], self.sd[c]);
            col.apply(|v| *v = (*v - m) / s);
        }
        x
    }
}

/// Affine layer; `weight` is row-major `outputs x inputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    /// The transposed weight (`inputs x outputs`) viewed in place.
    fn weight_t(&self) -> DMatrixView<'_, f64> {
        DMatrixView::from_slice(&self.weight, self.inputs, self.outputs)
    }

    fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut a = x * self.weight_t();
        for (o, mut col) in a.column_iter_mut().enumerate() {
            let b = self.bias[o];
            col.apply(|v| *v += b);
        }
        a
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormLayer {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNormLayer {
    fn fresh(width: usize) -> Self {
        Self {
            gamma: vec![1.0; width],
            beta: vec![0.0; width],
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
        }
    }

    fn eval(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = a.clone();
        for (c, mut col) in y.column_iter_mut().enumerate() {
            let inv = 1.0 / (self.running_var[c] + BN_EPS).sqrt();
            let (m, g, b) = (self.running_mean[c], self.gamma[c], self.beta[c]);
            col.apply(|v| *v = g * (*v - m) * inv + b);
        }
        y
    }

    fn train(&self, a: &DMatrix<f64>) -> BatchNormCache {
        let n = a.nrows() as f64;
        let width = a.ncols();
        let mut x_hat = a.clone();
        let mut y = a.clone();
        let mut mean = Vec::with_capacity(width);
        let mut var = Vec::with_capacity(width);
        let mut inv_std = Vec::with_capacity(width);
        for c in 0..width {
            let col = a.column(c);
            let m = col.sum() / n;
            let v = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
            let inv = 1.0 / (v + BN_EPS).sqrt();
            let (g, b) = (self.gamma[c], self.beta[c]);
            for r in 0..a.nrows() {
                let xh = (a[(r, c)] - m) * inv;
                x_hat[(r, c)] = xh;
                y[(r, c)] = g * xh + b;
            }
            mean.push(m);
            var.push(v);
            inv_std.push(inv);
        }
        BatchNormCache {
            x_hat,
            y,
            mean,
            var,
            inv_std,
        }
    }

    fn update_running(&mut self, cache: &BatchNormCache, n: usize) {
        let unbias = n as f64 / (n as f64 - 1.0);
        for c in 0..self.gamma.len() {
            self.running_mean[c] = (1.0 - BN_MOMENTUM) * self.running_mean[c] + BN_MOMENTUM * cache.mean[c];
            self.running_var[c] = (1.0 - BN_MOMENTUM) * self.running_var[c] + BN_MOMENTUM * cache.var[c] * unbias;
        }
    }

    /// Returns `(d input, d gamma, d beta)`.
    fn backward(&self, cache: &BatchNormCache, dy: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, Vec<f64>) {
        let n = dy.nrows() as f64;
        let width = dy.ncols();
        let mut dx = DMatrix::zeros(dy.nrows(), width);
        let mut dgamma = Vec::with_capacity(width);
        let mut dbeta = Vec::with_capacity(width);
        for c in 0..width {
            let g = self.gamma[c];
            let dyc = dy.column(c);
            let xh = cache.x_hat.column(c);
            let sum_dy: f64 = dyc.sum();
            let sum_dy_xh: f64 = dyc.iter().zip(xh.iter()).map(|(a, b)| a * b).sum();
            dgamma.push(sum_dy_xh);
            dbeta.push(sum_dy);
            let k = g * cache.inv_std[c] / n;
            for r in 0..dy.nrows() {
                dx[(r, c)] = k * (n * dyc[r] - sum_dy - xh[r] * sum_dy_xh);
            }
        }
        (dx, dgamma, dbeta)
    }
}

struct BatchNormCache {
    x_hat: DMatrix<f64>,
    y: DMatrix<f64>,
    mean: Vec<f64>,
    var: Vec<f64>,
    inv_std: Vec<f64>,
}

/// Everything a training-mode forward pass keeps for the backward pass.
pub struct ForwardCache {
    x: DMatrix<f64>,
    bn: [BatchNormCache; 3],
    r1: DMatrix<f64>,
    r2_mask: DMatrix<f64>,
    h2: DMatrix<f64>,
    /// Unclamped sigmoid outputs.
    raw: Vec<f64>,
    /// Clamped scores.
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub architecture: Architecture,
    pub standardizer: Standardizer,
    pub layers: Vec<DenseLayer>,
    pub norms: Vec<BatchNormLayer>,
}

/// Seeded He-style initialization: weights drawn from `N(0, 2/fan_in)`,
/// zero biases, unit batch-norm scales, zero shifts, running statistics
/// at mean 0 / variance 1 and an identity standardizer.
pub fn init_params(seed: u64, architecture: Architecture) -> Result<NetworkParams> {
    let architecture = Architecture::new(architecture.input_dim, architecture.hidden)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(3);
    let mut norms = Vec::with_capacity(3);
    for (inputs, outputs) in architecture.layer_shapes() {
        let normal = Normal::new(0.0, (2.0 / inputs as f64).sqrt())
            .map_err(|e| Error::Numeric(e.to_string()))?;
        let weight = (0..inputs * outputs).map(|_| normal.sample(&mut rng)).collect();
        layers.push(DenseLayer {
            inputs,
            outputs,
            weight,
            bias: vec![0.0; outputs],
        });
        norms.push(BatchNormLayer::fresh(outputs));
    }
    Ok(NetworkParams {
        architecture,
        standardizer: Standardizer::identity(architecture.input_dim),
        layers,
        norms,
    })
}

#[inline]
fn relu_inplace(m: &mut DMatrix<f64>) -> DMatrix<f64> {
    let mask = m.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    m.apply(|v| *v = v.max(0.0));
    mask
}

#[inline]
fn clamp_score(p: f64) -> f64 {
    p.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP)
}

impl NetworkParams {
    fn check_input(&self, z: &DMatrix<f64>) -> Result<()> {
        if z.ncols() != self.architecture.input_dim {
            return Err(Error::domain(format!(
                "network expects {} covariates, got {}",
                self.architecture.input_dim,
                z.ncols()
            )));
        }
        if z.nrows() == 0 {
            return Err(Error::domain("empty covariate matrix"));
        }
        Ok(())
    }

    /// Evaluation-mode scores for raw (unstandardized) covariates.
    pub fn predict(&self, z: &DMatrix<f64>) -> Result<Vec<f64>> {
        self.check_input(z)?;
        let x = self.standardizer.apply(z);
        let mut a1 = self.norms[0].eval(&self.layers[0].forward(&x));
        relu_inplace(&mut a1);
        let mut a2 = self.norms[1].eval(&self.layers[1].forward(&a1));
        relu_inplace(&mut a2);
        let h2 = a2 + &a1;
        let y3 = self.norms[2].eval(&self.layers[2].forward(&h2));
        Ok(y3.iter().map(|&v| clamp_score(sigmoid(v))).collect())
    }

    /// Training-mode pass on already standardized inputs.
    pub fn forward_cache(&self, x: &DMatrix<f64>) -> Result<ForwardCache> {
        if x.nrows() < 2 {
            return Err(Error::degenerate(
                "batch normalization needs at least two rows in training mode",
            ));
        }
        if x.ncols() != self.architecture.input_dim {
            return Err(Error::domain("input width does not match the network"));
        }
        let bn1 = self.norms[0].train(&self.layers[0].forward(x));
        let mut r1 = bn1.y.clone();
        relu_inplace(&mut r1);
        let bn2 = self.norms[1].train(&self.layers[1].forward(&r1));
        let mut r2 = bn2.y.clone();
        let r2_mask = relu_inplace(&mut r2);
        let h2 = r2 + &r1;
        let bn3 = self.norms[2].train(&self.layers[2].forward(&h2));
        let raw: Vec<f64> = bn3.y.iter().map(|&v| sigmoid(v)).collect();
        let scores = raw.iter().map(|&p| clamp_score(p)).collect();
        Ok(ForwardCache {
            x: x.clone(),
            bn: [bn1, bn2, bn3],
            r1,
            r2_mask,
            h2,
            raw,
            scores,
        })
    }

    /// Training-mode forward on raw covariates; updates running statistics.
    pub fn forward_train(&mut self, z: &DMatrix<f64>) -> Result<Vec<f64>> {
        self.check_input(z)?;
        let cache = self.forward_cache(&self.standardizer.apply(z))?;
        self.update_running(&cache);
        Ok(cache.scores)
    }

    pub fn update_running(&mut self, cache: &ForwardCache) {
        let n = cache.x.nrows();
        for (norm, bn) in self.norms.iter_mut().zip(&cache.bn) {
            norm.update_running(bn, n);
        }
    }

    /// Gradient of a loss with respect to every trainable parameter, given
    /// `dL/dp_j` for the clamped scores. Layout matches [`Self::flatten`].
    pub fn backward(&self, cache: &ForwardCache, d_scores: &[f64]) -> Vec<f64> {
        let n = cache.x.nrows();
        // through the clamp and the sigmoid
        let dy3 = DMatrix::from_iterator(
            n,
            1,
            cache.raw.iter().zip(d_scores).map(|(&p, &g)| {
                if (SCORE_CLAMP..=1.0 - SCORE_CLAMP).contains(&p) {
                    g * p * (1.0 - p)
                } else {
                    0.0
                }
            }),
        );
        let (da3, dg3, db3) = self.norms[2].backward(&cache.bn[2], &dy3);
        let (dw3, dbias3) = dense_grads(&cache.h2, &da3);
        let dh2 = &da3 * self.layers[2].weight_t().transpose();

        let dy2 = dh2.component_mul(&cache.r2_mask);
        let (da2, dg2, db2) = self.norms[1].backward(&cache.bn[1], &dy2);
        let (dw2, dbias2) = dense_grads(&cache.r1, &da2);
        let dr1 = dh2 + &da2 * self.layers[1].weight_t().transpose();

        let mask1 = cache.bn[0].y.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
        let dy1 = dr1.component_mul(&mask1);
        let (da1, dg1, db1) = self.norms[0].backward(&cache.bn[0], &dy1);
        let (dw1, dbias1) = dense_grads(&cache.x, &da1);

        let mut g = Vec::with_capacity(self.architecture.parameter_count());
        for (dw, db, dg, dbeta) in [
            (dw1, dbias1, dg1, db1),
            (dw2, dbias2, dg2, db2),
            (dw3, dbias3, dg3, db3),
        ] {
            g.extend(dw);
            g.extend(db);
            g.extend(dg);
            g.extend(dbeta);
        }
        g
    }

    /// Trainable parameters as one vector: per layer, weight (row-major),
    /// bias, batch-norm scale, batch-norm shift.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.architecture.parameter_count());
        for (layer, norm) in self.layers.iter().zip(&self.norms) {
            out.extend_from_slice(&layer.weight);
            out.extend_from_slice(&layer.bias);
            out.extend_from_slice(&norm.gamma);
            out.extend_from_slice(&norm.beta);
        }
        out
    }

    pub fn unflatten(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.architecture.parameter_count() {
            return Err(Error::domain("parameter vector has the wrong length"));
        }
        let mut pos = 0;
        let mut take = |dst: &mut Vec<f64>| {
            let len = dst.len();
            dst.copy_from_slice(&theta[pos..pos + len]);
            pos += len;
        };
        for (layer, norm) in self.layers.iter_mut().zip(self.norms.iter_mut()) {
            take(&mut layer.weight);
            take(&mut layer.bias);
            take(&mut norm.gamma);
            take(&mut norm.beta);
        }
        Ok(())
    }
}

/// Row-major weight gradient `da' x` and bias gradient.
fn dense_grads(x: &DMatrix<f64>, da: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    // x' da is inputs x outputs column-major, i.e. outputs x inputs row-major
    let g = x.tr_mul(da);
    let bias = da.column_iter().map(|c| c.sum()).collect();
    (g.as_slice().to_vec(), bias)
}

/// Forward pass in either mode. Training mode uses batch statistics and
/// updates the running statistics held in `params`.
pub fn forward(params: &mut NetworkParams, z: &DMatrix<f64>, mode: Mode) -> Result<Vec<f64>> {
    match mode {
        Mode::Train => params.forward_train(z),
        Mode::Eval => params.predict(z),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows() -> DMatrix<f64> {
        DMatrix::from_row_slice(3, 2, &[1.0, 2.0, -1.0, 0.5, 0.2, -0.3])
    }

    /// 2 inputs, 2 hidden units, fixed weights.
    fn hand_network() -> NetworkParams {
        let mut p = init_params(0, Architecture::new(2, 2).unwrap()).unwrap();
        p.layers[0].weight = vec![1.0, -1.0, 0.5, 2.0];
        p.layers[0].bias = vec![0.0, 0.1];
        p.layers[1].weight = vec![1.0, 0.0, -1.0, 1.0];
        p.layers[1].bias = vec![0.0, -0.2];
        p.layers[2].weight = vec![0.3, -0.2];
        p.layers[2].bias = vec![0.05];
        p
    }

    fn dot(w: &[f64], x: &[f64]) -> f64 {
        w.iter().zip(x).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn zero_network_outputs_one_half() {
        let mut p = init_params(3, Architecture::new(2, 4).unwrap()).unwrap();
        let zeros = vec![0.0; p.architecture.parameter_count()];
        p.unflatten(&zeros).unwrap();
        assert!(p.predict(&rows()).unwrap().iter().all(|&v| v == 0.5));
        let cache = p.forward_cache(&rows()).unwrap();
        assert!(cache.scores.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn eval_forward_matches_hand_computation() {
        let mut p = hand_network();
        for norm in &mut p.norms {
            // makes each eval-mode batch norm the identity map
            norm.running_var.iter_mut().for_each(|v| *v = 1.0 - BN_EPS);
        }
        let got = p.predict(&rows()).unwrap();
        let z = rows();
        for i in 0..3 {
            let x = [z[(i, 0)], z[(i, 1)]];
            let r1 = [
                (dot(&[1.0, -1.0], &x) + 0.0).max(0.0),
                (dot(&[0.5, 2.0], &x) + 0.1).max(0.0),
            ];
            let a2 = [dot(&[1.0, 0.0], &r1), dot(&[-1.0, 1.0], &r1) - 0.2];
            let h2 = [a2[0].max(0.0) + r1[0], a2[1].max(0.0) + r1[1]];
            let y = dot(&[0.3, -0.2], &h2) + 0.05;
            let expect = 1.0 / (1.0 + (-y).exp());
            assert!((got[i] - expect).abs() < 1e-10, "row {i}: {} vs {expect}", got[i]);
        }
    }

    /// Batch normalization of one column with biased batch variance.
    fn bn(col: &[f64]) -> Vec<f64> {
        let n = col.len() as f64;
        let m = col.iter().sum::<f64>() / n;
        let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
        col.iter().map(|x| (x - m) / (v + BN_EPS).sqrt()).collect()
    }

    #[test]
    fn train_forward_matches_hand_computation() {
        let p = hand_network();
        let z = rows();
        let got = p.forward_cache(&z).unwrap().scores;
        let x: Vec<[f64; 2]> = (0..3).map(|i| [z[(i, 0)], z[(i, 1)]]).collect();
        let a1: Vec<Vec<f64>> = [([1.0, -1.0], 0.0), ([0.5, 2.0], 0.1)]
            .iter()
            .map(|(w, b)| x.iter().map(|xi| dot(w, xi) + b).collect())
            .collect();
        let r1: Vec<Vec<f64>> = a1.iter().map(|c| bn(c).iter().map(|v| v.max(0.0)).collect()).collect();
        let a2: Vec<Vec<f64>> = [([1.0, 0.0], 0.0), ([-1.0, 1.0], -0.2)]
            .iter()
            .map(|(w, b)| (0..3).map(|i| dot(w, &[r1[0][i], r1[1][i]]) + b).collect())
            .collect();
        let h2: Vec<Vec<f64>> = a2
            .iter()
            .zip(&r1)
            .map(|(c, r)| bn(c).iter().zip(r).map(|(v, r)| v.max(0.0) + r).collect())
            .collect();
        let a3: Vec<f64> = (0..3).map(|i| dot(&[0.3, -0.2], &[h2[0][i], h2[1][i]]) + 0.05).collect();
        for (i, y) in bn(&a3).iter().enumerate() {
            let expect = 1.0 / (1.0 + (-y).exp());
            assert!((got[i] - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn init_is_seeded() {
        let arch = Architecture::new(4, 10).unwrap();
        assert_eq!(init_params(5, arch).unwrap(), init_params(5, arch).unwrap());
        assert_ne!(init_params(5, arch).unwrap(), init_params(6, arch).unwrap());
        assert!(Architecture::new(4, 0).is_err());
    }

    #[test]
    fn init_variance_follows_fan_in() {
        let p = init_params(1, Architecture::new(8, 100).unwrap()).unwrap();
        let w = &p.layers[1].weight;
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var / 0.02 - 1.0).abs() < 0.2, "variance {var}");
        assert!(p.norms.iter().all(|b| b.gamma.iter().all(|&g| g == 1.0) && b.beta.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn flatten_round_trips() {
        let mut p = init_params(2, Architecture::new(3, 5).unwrap()).unwrap();
        let theta = p.flatten();
        assert_eq!(theta.len(), p.architecture.parameter_count());
        assert_eq!(theta.len(), (3 * 5 + 15) + (25 + 15) + (5 + 3));
        let shifted: Vec<f64> = theta.iter().map(|v| v + 1.0).collect();
        p.unflatten(&shifted).unwrap();
        assert_eq!(p.flatten(), shifted);
        assert!(p.unflatten(&theta[1..]).is_err());
    }

    #[test]
    fn degenerate_and_mismatched_batches() {
        let mut p = init_params(0, Architecture::new(2, 3).unwrap()).unwrap();
        let one = DMatrix::from_row_slice(1, 2, &[0.5, 0.5]);
        assert!(matches!(p.forward_cache(&one), Err(Error::DegenerateData(_))));
        assert!(p.predict(&DMatrix::zeros(3, 4)).is_err());
        assert!(forward(&mut p, &DMatrix::zeros(3, 4), Mode::Train).is_err());
    }

    #[test]
    fn eval_is_pure_and_train_updates_running_stats() {
        let mut p = init_params(9, Architecture::new(2, 3).unwrap()).unwrap();
        let a = forward(&mut p, &rows(), Mode::Eval).unwrap();
        let b = forward(&mut p, &rows(), Mode::Eval).unwrap();
        assert_eq!(a, b);
        let before = p.norms[0].running_mean.clone();
        forward(&mut p, &rows(), Mode::Train).unwrap();
        assert_ne!(before, p.norms[0].running_mean);
        assert!(p.norms.iter().all(|b| b.running_var.iter().all(|&v| v > 0.0)));
        for s in forward(&mut p, &rows(), Mode::Eval).unwrap() {
            assert!(s > 0.0 && s < 1.0);
        }
    }
}
