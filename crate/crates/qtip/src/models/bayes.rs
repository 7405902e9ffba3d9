//! Bayesian linear regression with the conjugate Gaussian posterior.
//!
//! The prior on the coefficients is N(mu, sigma_beta^2 I) and observations
//! are y ~ N(X beta, sigma_y^2 I). The posterior is Gaussian with
//! covariance (sigma_beta^-2 I + sigma_y^-2 X^T X)^-1 and mean
//! cov * (sigma_y^-2 X^T y + sigma_beta^-2 mu). Used to transfer the
//! incident-free model's coefficients into the adapted model when little
//! what-if data exists.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::RegressionDataset;
use crate::models::linear::design_matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BayesianLinearModel {
    pub columns: Vec<String>,
    pub prior_mean: Vec<f64>,
    pub sigma_beta: f64,
    pub sigma_y: f64,
    pub posterior_mean: Vec<f64>,
    pub posterior_cov: DMatrix<f64>,
}

impl BayesianLinearModel {
    pub fn input_dim(&self) -> usize {
        self.posterior_mean.len()
    }

    /// Posterior-mean prediction.
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.posterior_mean.len() {
            return Err(Error::DimensionMismatch {
                got: x.len(),
                expected: self.posterior_mean.len(),
            });
        }
        Ok(self.posterior_mean.iter().zip(x).map(|(b, v)| b * v).sum())
    }
}

pub fn fit_bayes(
    data: &RegressionDataset,
    prior_mean: &[f64],
    sigma_beta: f64,
    sigma_y: f64,
) -> Result<BayesianLinearModel> {
    if sigma_beta <= 0.0 {
        return Err(Error::NonPositiveHyper { name: "sigma_beta", value: sigma_beta });
    }
    if sigma_y <= 0.0 {
        return Err(Error::NonPositiveHyper { name: "sigma_y", value: sigma_y });
    }
    let k = data.k();
    if prior_mean.len() != k {
        return Err(Error::DimensionMismatch { got: prior_mean.len(), expected: k });
    }

    let prec_beta = sigma_beta.powi(-2);
    let prec_y = sigma_y.powi(-2);
    let mu = DVector::from_column_slice(prior_mean);

    // n = 0 is allowed and recovers the prior exactly.
    let (precision, rhs) = if data.n() == 0 {
        (DMatrix::identity(k, k) * prec_beta, &mu * prec_beta)
    } else {
        let x = design_matrix(data);
        let y = DVector::from_column_slice(&data.y);
        let precision = DMatrix::identity(k, k) * prec_beta + x.transpose() * &x * prec_y;
        let rhs = x.transpose() * y * prec_y + &mu * prec_beta;
        (precision, rhs)
    };

    let chol = precision
        .clone()
        .cholesky()
        .ok_or_else(|| Error::DatasetMismatch("posterior precision not positive-definite".into()))?;
    let mut cov = chol.inverse();
    // Enforce exact symmetry against round-off.
    cov = (&cov + cov.transpose()) * 0.5;
    let mean = &cov * rhs;

    Ok(BayesianLinearModel {
        columns: data.columns.clone(),
        prior_mean: prior_mean.to_vec(),
        sigma_beta,
        sigma_y,
        posterior_mean: mean.iter().copied().collect(),
        posterior_cov: cov,
    })
}
