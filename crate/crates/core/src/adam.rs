//! ADAM with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            first: vec![0.0; len],
            second: vec![0.0; len],
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update to `params` in place.
    pub fn step(&mut self, params: &mut [f64], gradient: &[f64], learning_rate: f64) -> Result<()> {
        if params.len() != self.first.len() || gradient.len() != self.first.len() {
            return Err(Error::domain("optimizer state does not match parameter count"));
        }
        if let Some(i) = gradient.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient at parameter {i}")));
        }
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(gradient)
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= learning_rate * m_hat / (v_hat.sqrt() + EPSILON);
        }
        Ok(())
    }
}

/// Functional form of [`AdamState::step`].
pub fn adam_step(
    state: &AdamState,
    params: &[f64],
    gradient: &[f64],
    learning_rate: f64,
) -> Result<(Vec<f64>, AdamState)> {
    let mut state = state.clone();
    let mut params = params.to_vec();
    state.step(&mut params, gradient, learning_rate)?;
    Ok((params, state))
}
