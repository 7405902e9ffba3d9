//! Gaussian-process regression with an RBF kernel and a zero-mean prior.
//!
//! Hyperparameters are chosen by exhaustive grid search over the input
//! scaling factor tau and the noise variance, maximizing the log marginal
//! likelihood. The kernel is K_ij = exp(-0.5 * ||x_i/tau - x_j/tau||^2).

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::RegressionDataset;

/// The scaling-factor grid searched during fitting.
pub const TAU_GRID: [f64; 13] =
    [0.1, 1.0, 2.0, 4.0, 8.0, 9.0, 10.0, 11.0, 12.0, 13.0, 14.0, 15.0, 16.0];
/// Noise-variance grid, (km/h)^2.
pub const NOISE_GRID: [f64; 5] = [1e-4, 1e-2, 1e-1, 1.0, 10.0];

/// Training sets larger than this are subsampled (seeded, deterministic)
/// before the O(n^3) fit.
pub const MAX_TRAIN_ROWS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GPModel {
    pub columns: Vec<String>,
    pub tau: f64,
    pub noise_var: f64,
    pub x_train: Vec<Vec<f64>>,
    pub y_train: Vec<f64>,
    /// Precomputed (K + noise I)^-1 y.
    pub alpha: Vec<f64>,
    pub log_marginal_likelihood: f64,
}

impl GPModel {
    pub fn input_dim(&self) -> usize {
        self.x_train[0].len()
    }

    /// Posterior-mean prediction: k_*^T (K + noise I)^-1 y.
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        let dim = self.input_dim();
        if x.len() != dim {
            return Err(Error::DimensionMismatch { got: x.len(), expected: dim });
        }
        let mut acc = 0.0;
        for (xi, &ai) in self.x_train.iter().zip(&self.alpha) {
            acc += ai * rbf(x, xi, self.tau);
        }
        Ok(acc)
    }
}

fn rbf(a: &[f64], b: &[f64], tau: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(ai, bi)| ((ai - bi) / tau).powi(2)).sum();
    (-0.5 * d2).exp()
}

fn gram(x: &[Vec<f64>], tau: f64) -> DMatrix<f64> {
    let n = x.len();
    DMatrix::from_fn(n, n, |i, j| rbf(&x[i], &x[j], tau))
}

pub fn fit_gp(data: &RegressionDataset, tau_grid: &[f64], noise_grid: &[f64]) -> Result<GPModel> {
    if data.n() < 2 {
        return Err(Error::TooFewRows { n: data.n(), k: 2 });
    }
    for &tau in tau_grid {
        if tau <= 0.0 {
            return Err(Error::NonPositiveHyper { name: "tau", value: tau });
        }
    }
    for &nv in noise_grid {
        if nv < 0.0 {
            return Err(Error::NonPositiveHyper { name: "noise_var", value: nv });
        }
    }

    let (x, y) = subsample(data);
    let n = x.len();
    let y_vec = DVector::from_column_slice(&y);

    let mut best: Option<(f64, f64, f64, Vec<f64>)> = None; // (lml, tau, noise, alpha)
    for &tau in tau_grid {
        let k = gram(&x, tau);
        for &noise in noise_grid {
            let mut ky = k.clone();
            for i in 0..n {
                ky[(i, i)] += noise;
            }
            let Some(chol) = ky.cholesky() else { continue };
            let alpha = chol.solve(&y_vec);
            let log_det: f64 = (0..n).map(|i| chol.l_dirty()[(i, i)].ln()).sum::<f64>() * 2.0;
            let lml = -0.5 * y_vec.dot(&alpha)
                - 0.5 * log_det
                - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
            if best.as_ref().map_or(true, |(b, ..)| lml > *b) {
                best = Some((lml, tau, noise, alpha.iter().copied().collect()));
            }
        }
    }

    let (lml, tau, noise_var, alpha) = best.ok_or(Error::SingularKernel)?;
    Ok(GPModel {
        columns: data.columns.clone(),
        tau,
        noise_var,
        x_train: x,
        y_train: y,
        alpha,
        log_marginal_likelihood: lml,
    })
}

fn subsample(data: &RegressionDataset) -> (Vec<Vec<f64>>, Vec<f64>) {
    if data.n() <= MAX_TRAIN_ROWS {
        return (data.x.clone(), data.y.clone());
    }
    let mut idx: Vec<usize> = (0..data.n()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0x6770);
    idx.shuffle(&mut rng);
    idx.truncate(MAX_TRAIN_ROWS);
    idx.sort_unstable();
    (
        idx.iter().map(|&i| data.x[i].clone()).collect(),
        idx.iter().map(|&i| data.y[i]).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{Phase, RegressionDataset};
    use approx::assert_abs_diff_eq;

    fn dataset(x: Vec<Vec<f64>>, y: Vec<f64>) -> RegressionDataset {
        let k = x[0].len();
        let minutes = (0..y.len() as u32).collect();
        RegressionDataset {
            columns: (0..k).map(|i| format!("c{i}")).collect(),
            x,
            y,
            minutes,
            phase: Phase::Normal,
        }
    }

    #[test]
    fn noise_free_gp_interpolates_training_points() {
        let x: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64]).collect();
        let y: Vec<f64> = x.iter().map(|v| 60.0 + 10.0 * (v[0] * 0.7).sin()).collect();
        let m = fit_gp(&dataset(x.clone(), y.clone()), &[2.0], &[1e-9]).unwrap();
        for (xi, yi) in x.iter().zip(&y) {
            assert_abs_diff_eq!(m.predict(xi).unwrap(), *yi, epsilon = 1e-4);
        }
    }

    #[test]
    fn far_field_prediction_decays_to_prior_mean() {
        let m = fit_gp(&dataset(vec![vec![0.0], vec![0.1]], vec![50.0, 50.0]), &[1.0], &[1e-6])
            .unwrap();
        let far = m.predict(&[1e4]).unwrap();
        assert!(far.abs() < 1e-6, "far-field prediction {far} should decay to 0");
    }

    #[test]
    fn grid_choice_beats_the_worst_grid_point() {
        // 25 samples of a smooth 1-D function; compare held-out RMSE of the
        // marginal-likelihood pick against every grid point.
        let xs: Vec<Vec<f64>> = (0..25).map(|i| vec![i as f64 * 0.4]).collect();
        let f = |v: f64| (v * 0.9).sin() * 3.0 + 0.2 * v;
        let ys: Vec<f64> = xs.iter().map(|v| f(v[0])).collect();
        let train = dataset(xs.clone(), ys.clone());
        let test_x: Vec<Vec<f64>> = (0..30).map(|i| vec![0.2 + i as f64 * 0.33]).collect();

        let rmse_of = |m: &GPModel| {
            let se: f64 = test_x
                .iter()
                .map(|x| (m.predict(x).unwrap() - f(x[0])).powi(2))
                .sum::<f64>();
            (se / test_x.len() as f64).sqrt()
        };

        let chosen = fit_gp(&train, &TAU_GRID, &NOISE_GRID).unwrap();
        let chosen_rmse = rmse_of(&chosen);
        let mut worst = f64::NEG_INFINITY;
        for &tau in &TAU_GRID {
            for &noise in &NOISE_GRID {
                if let Ok(m) = fit_gp(&train, &[tau], &[noise]) {
                    worst = worst.max(rmse_of(&m));
                }
            }
        }
        assert!(
            chosen_rmse <= worst,
            "chosen grid point rmse {chosen_rmse} exceeds worst {worst}"
        );
    }

    #[test]
    fn gram_matrix_is_symmetric_with_unit_diagonal() {
        let x: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let k = gram(&x, 3.0);
        for i in 0..6 {
            assert_abs_diff_eq!(k[(i, i)], 1.0, epsilon = 1e-15);
            for j in 0..6 {
                assert_abs_diff_eq!(k[(i, j)], k[(j, i)], epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn single_row_is_rejected() {
        let d = dataset(vec![vec![1.0]], vec![1.0]);
        assert!(matches!(fit_gp(&d, &TAU_GRID, &NOISE_GRID), Err(Error::TooFewRows { .. })));
    }

    #[test]
    fn oversized_training_set_is_subsampled_deterministically() {
        let n = MAX_TRAIN_ROWS + 500;
        let x: Vec<Vec<f64>> = (0..n).map(|i| vec![(i % 37) as f64]).collect();
        let y: Vec<f64> = (0..n).map(|i| (i % 37) as f64 * 2.0).collect();
        let d = dataset(x, y);
        let a = fit_gp(&d, &[4.0], &[1e-2]).unwrap();
        let b = fit_gp(&d, &[4.0], &[1e-2]).unwrap();
        assert_eq!(a.x_train.len(), MAX_TRAIN_ROWS);
        assert_eq!(a, b);
    }
}
