//! The observational dataset: binary treatment, covariates and an optional outcome.

use nalgebra::DMatrix;

use crate::error::{Error, IngestError, Result};

/// A validated sample of `N` subjects.
///
/// Covariates are stored in a design matrix whose first column is the
/// intercept (identically 1), so `dim() == n_covariates() + 1`. Balance
/// statistics use the design matrix on its original scale; the network sees
/// only the non-intercept columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    ids: Vec<String>,
    treatment: Vec<u8>,
    covariate_names: Vec<String>,
    design: DMatrix<f64>,
    outcome: Option<Vec<f64>>,
}

impl Dataset {
    /// Builds a dataset from an `N x M` covariate matrix (no intercept).
    /// Subject ids default to `1..=N`.
    pub fn new(
        covariate_names: Vec<String>,
        covariates: &DMatrix<f64>,
        treatment: Vec<u8>,
        outcome: Option<Vec<f64>>,
    ) -> Result<Self> {
        let ids = (1..=treatment.len()).map(|i| i.to_string()).collect();
        Self::with_ids(ids, covariate_names, covariates, treatment, outcome)
    }

    pub fn with_ids(
        ids: Vec<String>,
        covariate_names: Vec<String>,
        covariates: &DMatrix<f64>,
        treatment: Vec<u8>,
        outcome: Option<Vec<f64>>,
    ) -> Result<Self> {
        let n = treatment.len();
        if n == 0 {
            return Err(Error::domain("dataset has no subjects"));
        }
        if covariates.nrows() != n || ids.len() != n {
            return Err(Error::domain(format!(
                "row count mismatch: {} treatments, {} covariate rows, {} ids",
                n,
                covariates.nrows(),
                ids.len()
            )));
        }
        if covariate_names.len() != covariates.ncols() {
            return Err(Error::domain("covariate name count does not match columns"));
        }
        if let Some(row) = treatment.iter().position(|&t| t > 1) {
            return Err(IngestError::NonBinaryTreatment {
                row: row + 1,
                value: treatment[row].to_string(),
            }
            .into());
        }
        if let Some(y) = &outcome {
            if y.len() != n {
                return Err(Error::domain("outcome length does not match subjects"));
            }
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::domain("outcome contains non-finite values"));
            }
        }
        for (c, name) in covariate_names.iter().enumerate() {
            let col = covariates.column(c);
            if col.iter().any(|v| !v.is_finite()) {
                return Err(Error::domain(format!("covariate `{name}` has non-finite values")));
            }
            let first = col[0];
            if col.iter().all(|&v| v == first) {
                return Err(IngestError::ConstantCovariate(name.clone()).into());
            }
        }
        let m = covariates.ncols();
        let design = DMatrix::from_fn(n, m + 1, |i, j| if j == 0 { 1.0 } else { covariates[(i, j - 1)] });
        Ok(Self {
            ids,
            treatment,
            covariate_names,
            design,
            outcome,
        })
    }

    /// Number of subjects.
    pub fn n(&self) -> usize {
        self.treatment.len()
    }

    /// Number of covariates, excluding the intercept.
    pub fn n_covariates(&self) -> usize {
        self.design.ncols() - 1
    }

    /// Design dimension `L`, including the intercept.
    pub fn dim(&self) -> usize {
        self.design.ncols()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn treatment(&self) -> &[u8] {
        &self.treatment
    }

    /// Treatment of subject `j` as a real number.
    #[inline]
    pub fn t(&self, j: usize) -> f64 {
        f64::from(self.treatment[j])
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    /// `N x L` design matrix with the intercept in column 0.
    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    /// `N x M` covariates without the intercept.
    pub fn covariates(&self) -> DMatrix<f64> {
        self.design.columns(1, self.n_covariates()).into_owned()
    }

    pub fn outcome(&self) -> Option<&[f64]> {
        self.outcome.as_deref()
    }

    pub fn n_treated(&self) -> usize {
        self.treatment.iter().filter(|&&t| t == 1).count()
    }

    pub fn n_control(&self) -> usize {
        self.n() - self.n_treated()
    }

    pub fn has_both_arms(&self) -> bool {
        let n1 = self.n_treated();
        n1 > 0 && n1 < self.n()
    }

    pub(crate) fn require_both_arms(&self) -> Result<()> {
        if self.has_both_arms() {
            Ok(())
        } else {
            Err(Error::degenerate("treatment vector contains a single class"))
        }
    }

    /// Resample subjects by index (with repetition), skipping the
    /// constant-covariate check: a bootstrap draw may legitimately hit it.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let l = self.dim();
        let design = DMatrix::from_fn(rows.len(), l, |i, j| self.design[(rows[i], j)]);
        Self {
            ids: rows.iter().map(|&r| self.ids[r].clone()).collect(),
            treatment: rows.iter().map(|&r| self.treatment[r]).collect(),
            covariate_names: self.covariate_names.clone(),
            design,
            outcome: self
                .outcome
                .as_ref()
                .map(|y| rows.iter().map(|&r| y[r]).collect()),
        }
    }
}
