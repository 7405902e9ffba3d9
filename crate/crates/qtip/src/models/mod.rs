//! The predictor zoo: OLS linear, Bayesian linear, Gaussian process, and a
//! small MLP, plus the two-piece incident wrapper that routes on elapsed
//! incident time.

pub mod bayes;
pub mod gp;
pub mod linear;
pub mod mlp;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureVector;

pub use bayes::{fit_bayes, BayesianLinearModel};
pub use gp::{fit_gp, GPModel, NOISE_GRID, TAU_GRID};
pub use linear::{fit_ols, fit_ols_min_norm, fit_ols_with_intercept, LinearModel};
pub use mlp::{fit_mlp, MLPModel};

/// Any trained single-piece model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum FittedModel {
    Linear(LinearModel),
    Bayesian(BayesianLinearModel),
    Gp(GPModel),
    Mlp(MLPModel),
}

impl FittedModel {
    pub fn input_dim(&self) -> usize {
        match self {
            FittedModel::Linear(m) => m.input_dim(),
            FittedModel::Bayesian(m) => m.input_dim(),
            FittedModel::Gp(m) => m.input_dim(),
            FittedModel::Mlp(m) => m.input_dim(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            FittedModel::Linear(_) => "ols",
            FittedModel::Bayesian(_) => "bayes",
            FittedModel::Gp(_) => "gp",
            FittedModel::Mlp(_) => "mlp",
        }
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        match self {
            FittedModel::Linear(m) => m.predict(x),
            FittedModel::Bayesian(m) => m.predict(x),
            FittedModel::Gp(m) => m.predict(x),
            FittedModel::Mlp(m) => m.predict(x),
        }
    }

    /// Predicts from a feature vector, passing the elapsed incident time
    /// only when the model was trained with it.
    pub fn predict_features(&self, fv: &FeatureVector) -> Result<f64> {
        let speeds = [fv.s5, fv.s6, fv.u5, fv.u6, fv.d5, fv.d6];
        match self.input_dim() {
            6 => self.predict(&speeds),
            7 => {
                let t = fv.t_accident.ok_or(Error::MissingTAccident)?;
                let mut row = speeds.to_vec();
                row.push(t);
                self.predict(&row)
            }
            2 => self.predict(&[fv.s5, fv.s6]),
            3 => {
                let t = fv.t_accident.ok_or(Error::MissingTAccident)?;
                self.predict(&[fv.s5, fv.s6, t])
            }
            d => Err(Error::DimensionMismatch { got: 6, expected: d }),
        }
    }
}

/// The adapted incident model: one piece for the first 6 incident minutes,
/// one for the rest of the incident.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseAbnormalModel {
    pub early: FittedModel,
    pub late: FittedModel,
}

/// Elapsed incident minutes at or below this route to the early piece.
pub const EARLY_ROUTE_MAX_MIN: f64 = 6.0;

impl PiecewiseAbnormalModel {
    /// Routes on the elapsed incident time, which must be present.
    pub fn predict(&self, fv: &FeatureVector) -> Result<f64> {
        let t = fv.t_accident.ok_or(Error::MissingTAccident)?;
        let piece = if t <= EARLY_ROUTE_MAX_MIN { &self.early } else { &self.late };
        piece.predict_features(fv)
    }
}

/// On-disk model document, version-tagged for forward compatibility.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub format_version: u32,
    pub model: ModelPayload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelPayload {
    Piecewise(PiecewiseAbnormalModel),
    Single(FittedModel),
}

pub const MODEL_FORMAT_VERSION: u32 = 1;

impl ModelDocument {
    pub fn single(model: FittedModel) -> Self {
        ModelDocument { format_version: MODEL_FORMAT_VERSION, model: ModelPayload::Single(model) }
    }

    pub fn piecewise(model: PiecewiseAbnormalModel) -> Self {
        ModelDocument {
            format_version: MODEL_FORMAT_VERSION,
            model: ModelPayload::Piecewise(model),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}
