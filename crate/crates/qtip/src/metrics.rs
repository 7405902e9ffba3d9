//! Error and calibration measures-of-effectiveness.
//!
//! Two of the traffic-calibration measures circulate in the literature in
//! slightly different printed forms; both variants are implemented and the
//! standard form is the default (see [`MetricForm`]).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Prediction-minus-actual residuals, km/h.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSet {
    residuals: Vec<f64>,
}

impl ResidualSet {
    pub fn new(residuals: Vec<f64>) -> Result<Self> {
        if residuals.is_empty() {
            return Err(Error::EmptyResiduals);
        }
        if residuals.iter().any(|r| !r.is_finite()) {
            return Err(Error::DatasetMismatch("non-finite residual".into()));
        }
        Ok(ResidualSet { residuals })
    }

    pub fn from_predictions(predicted: &[f64], actual: &[f64]) -> Result<Self> {
        if predicted.len() != actual.len() {
            return Err(Error::DatasetMismatch(format!(
                "{} predictions vs {} actuals",
                predicted.len(),
                actual.len()
            )));
        }
        Self::new(predicted.iter().zip(actual).map(|(p, a)| p - a).collect())
    }

    pub fn len(&self) -> usize {
        self.residuals.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction requires at least one residual
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.residuals
    }
}

/// Mean signed deviation, km/h. Positive means over-estimation.
pub fn msd(r: &ResidualSet) -> f64 {
    r.residuals.iter().sum::<f64>() / r.len() as f64
}

/// Mean absolute error, km/h.
pub fn mae(r: &ResidualSet) -> f64 {
    r.residuals.iter().map(|v| v.abs()).sum::<f64>() / r.len() as f64
}

/// Root mean squared error, km/h.
pub fn rmse(r: &ResidualSet) -> f64 {
    (r.residuals.iter().map(|v| v * v).sum::<f64>() / r.len() as f64).sqrt()
}

/// Fraction of the ordinary model's RMSE removed by the adapted model.
/// Positive means the adapted model is better.
pub fn relative_improvement(rmse_ord: f64, rmse_abn: f64) -> Result<f64> {
    if rmse_ord <= 0.0 {
        return Err(Error::ZeroOrdinaryRmse);
    }
    Ok((rmse_ord - rmse_abn) / rmse_ord)
}

/// Simulated/observed pairs for calibration measures.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationPairSet {
    /// (simulated m, observed o).
    pairs: Vec<(f64, f64)>,
}

impl ObservationPairSet {
    pub fn new(pairs: Vec<(f64, f64)>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::EmptyResiduals);
        }
        if pairs.iter().any(|(m, o)| !m.is_finite() || !o.is_finite()) {
            return Err(Error::DatasetMismatch("non-finite observation pair".into()));
        }
        Ok(ObservationPairSet { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn pairs(&self) -> &[(f64, f64)] {
        &self.pairs
    }
}

/// Which printed variant of a contested formula to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MetricForm {
    /// The standard definition from the wider literature.
    #[default]
    Standard,
    /// The formula exactly as printed in some sources: RMSNE without the
    /// inner square, GEH with the sum across pairs inside one radical.
    AsPrinted,
}

/// Rooted mean squared normalized error, dimensionless.
///
/// Standard form: sqrt(mean(((m-o)/o)^2)). The as-printed variant omits the
/// inner square, so its radicand can go negative; the result is NaN then.
pub fn rmsne(p: &ObservationPairSet, form: MetricForm) -> Result<f64> {
    let mut acc = 0.0;
    for &(m, o) in &p.pairs {
        if o <= 0.0 {
            return Err(Error::NonPositiveObservation(o));
        }
        let ne = (m - o) / o;
        acc += match form {
            MetricForm::Standard => ne * ne,
            MetricForm::AsPrinted => ne,
        };
    }
    Ok((acc / p.len() as f64).sqrt())
}

/// Per-pair GEH statistics with the acceptance aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GehReport {
    pub per_pair: Vec<f64>,
    pub max: f64,
    /// Fraction of pairs with GEH below the conventional threshold of 5.
    pub pass_fraction: f64,
}

pub const GEH_THRESHOLD: f64 = 5.0;

/// Geoffrey E. Havers statistic per pair: sqrt(2(m-o)^2 / (m+o)).
pub fn geh(p: &ObservationPairSet) -> Result<GehReport> {
    let mut per_pair = Vec::with_capacity(p.len());
    for &(m, o) in &p.pairs {
        let sum = m + o;
        if sum <= 0.0 {
            return Err(Error::NonPositivePairSum(sum));
        }
        let e = m - o;
        per_pair.push((2.0 * e * e / sum).sqrt());
    }
    let max = per_pair.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let pass = per_pair.iter().filter(|&&g| g < GEH_THRESHOLD).count();
    Ok(GehReport { max, pass_fraction: pass as f64 / p.len() as f64, per_pair })
}

/// The as-printed GEH variant with the pair sum inside one radical:
/// sqrt(sum_i 2(m_i-o_i)^2 / (m_i+o_i)).
pub fn geh_summed(p: &ObservationPairSet) -> Result<f64> {
    let mut acc = 0.0;
    for &(m, o) in &p.pairs {
        let sum = m + o;
        if sum <= 0.0 {
            return Err(Error::NonPositivePairSum(sum));
        }
        let e = m - o;
        acc += 2.0 * e * e / sum;
    }
    Ok(acc.sqrt())
}

/// One CSV row of a metric report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub scenario_id: String,
    pub mode: String,
    pub model: String,
    pub phase: String,
    pub msd: f64,
    pub mae: f64,
    pub rmse: f64,
    pub rel_improvement: Option<f64>,
}
