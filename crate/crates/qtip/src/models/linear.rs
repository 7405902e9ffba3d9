//! Ordinary-least-squares linear model without an intercept.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::RegressionDataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub columns: Vec<String>,
    pub beta: Vec<f64>,
}

impl LinearModel {
    pub fn input_dim(&self) -> usize {
        self.beta.len()
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.beta.len() {
            return Err(Error::DimensionMismatch { got: x.len(), expected: self.beta.len() });
        }
        Ok(self.beta.iter().zip(x).map(|(b, v)| b * v).sum())
    }
}

pub(crate) fn design_matrix(data: &RegressionDataset) -> DMatrix<f64> {
    DMatrix::from_row_iterator(data.n(), data.k(), data.x.iter().flatten().copied())
}

/// Columns that are (numerically) linear combinations of earlier columns,
/// found by modified Gram-Schmidt.
fn collinear_columns(x: &DMatrix<f64>, names: &[String]) -> Vec<String> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut bad = Vec::new();
    for j in 0..x.ncols() {
        let col = x.column(j).into_owned();
        let scale = col.norm().max(1.0);
        let mut residual = col;
        for b in &basis {
            let proj = b.dot(&residual);
            residual -= b * proj;
        }
        if residual.norm() <= 1e-8 * scale {
            bad.push(names[j].clone());
        } else {
            let norm = residual.norm();
            basis.push(residual / norm);
        }
    }
    bad
}

/// Least-squares fit of y on the predictor columns, no intercept.
pub fn fit_ols(data: &RegressionDataset) -> Result<LinearModel> {
    fit_ols_with_intercept(data, false)
}

/// As [`fit_ols`], optionally prepending a constant column named
/// "intercept". The default model has none.
pub fn fit_ols_with_intercept(data: &RegressionDataset, intercept: bool) -> Result<LinearModel> {
    let mut x = design_matrix(data);
    let mut columns = data.columns.clone();
    if intercept {
        x = x.insert_column(0, 1.0);
        columns.insert(0, "intercept".to_string());
    }
    let (n, k) = (x.nrows(), x.ncols());
    if n < k {
        return Err(Error::TooFewRows { n, k });
    }
    let bad = collinear_columns(&x, &columns);
    if !bad.is_empty() {
        return Err(Error::CollinearColumns(bad));
    }
    let y = DVector::from_column_slice(&data.y);
    let beta = x
        .clone()
        .svd(true, true)
        .solve(&y, 1e-12)
        .map_err(|e| Error::DatasetMismatch(e.to_string()))?;
    Ok(LinearModel { columns, beta: beta.iter().copied().collect() })
}

/// Minimum-norm least-squares fit that tolerates rank deficiency; used when
/// a caller must produce some model from degenerate data (e.g. a single
/// what-if run).
pub fn fit_ols_min_norm(data: &RegressionDataset) -> Result<LinearModel> {
    let x = design_matrix(data);
    if data.n() == 0 {
        return Err(Error::TooFewRows { n: 0, k: data.k() });
    }
    let y = DVector::from_column_slice(&data.y);
    let beta = x
        .svd(true, true)
        .solve(&y, 1e-10)
        .map_err(|e| Error::DatasetMismatch(e.to_string()))?;
    Ok(LinearModel { columns: data.columns.clone(), beta: beta.iter().copied().collect() })
}
