//! A small multilayer perceptron trained by backpropagation with Adam.
//!
//! The output layer is the unweighted sum of the final hidden layer's
//! sigmoid activations, so the raw network output lies in (0, g). Since
//! speeds exceed that range, inputs are standardized per column and targets
//! are mapped to (y - mean)/std + g/2; predictions invert the mapping.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::RegressionDataset;

pub const MINIBATCH: usize = 100;
pub const MAX_EPOCHS: usize = 100;
pub const PATIENCE: usize = 10;
pub const VALIDATION_FRACTION: f64 = 0.1;
const ADAM_LR: f64 = 0.02;
const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MLPModel {
    pub columns: Vec<String>,
    /// Hidden layer count, 1 or 2.
    pub h: usize,
    /// Sigmoid units per hidden layer, 5 or 10.
    pub g: usize,
    /// Flat parameter vector; see [`param_count`] for the layout.
    pub weights: Vec<f64>,
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: f64,
    pub y_std: f64,
}

/// Parameters: g rows of (k+1) first-layer weights (input plus constant 1),
/// then, for h=2, g rows of (g+1) second-layer weights.
pub fn param_count(h: usize, g: usize, k: usize) -> usize {
    g * (k + 1) + if h == 2 { g * (g + 1) } else { 0 }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl MLPModel {
    pub fn input_dim(&self) -> usize {
        self.x_mean.len()
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.x_mean.iter().zip(&self.x_std))
            .map(|(v, (m, s))| if *s > 0.0 { (v - m) / s } else { 0.0 })
            .collect()
    }

    /// Network output before de-standardization; always in (0, g).
    pub fn raw_output(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch { got: x.len(), expected: self.input_dim() });
        }
        let xs = self.standardize(x);
        Ok(forward(self.h, self.g, &self.weights, &xs).0)
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        let raw = self.raw_output(x)?;
        Ok((raw - self.g as f64 / 2.0) * self.y_std + self.y_mean)
    }
}

/// Forward pass on a standardized input. Returns the raw output and the
/// hidden activations (layer 1, then layer 2 when present).
fn forward(h: usize, g: usize, w: &[f64], xs: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let k = xs.len();
    let mut a1 = vec![0.0; g];
    for j in 0..g {
        let row = &w[j * (k + 1)..(j + 1) * (k + 1)];
        let z = row[..k].iter().zip(xs).map(|(wi, xi)| wi * xi).sum::<f64>() + row[k];
        a1[j] = sigmoid(z);
    }
    if h == 1 {
        let out = a1.iter().sum();
        return (out, a1, Vec::new());
    }
    let base = g * (k + 1);
    let mut a2 = vec![0.0; g];
    for j in 0..g {
        let row = &w[base + j * (g + 1)..base + (j + 1) * (g + 1)];
        let z = row[..g].iter().zip(&a1).map(|(wi, ai)| wi * ai).sum::<f64>() + row[g];
        a2[j] = sigmoid(z);
    }
    let out = a2.iter().sum();
    (out, a1, a2)
}

/// Mean squared error and its gradient over a batch of standardized inputs
/// and scaled targets. Exposed so gradients can be checked against finite
/// differences.
pub fn batch_loss_and_grad(
    h: usize,
    g: usize,
    w: &[f64],
    xs: &[Vec<f64>],
    ts: &[f64],
) -> (f64, Vec<f64>) {
    let n = xs.len();
    let k = xs[0].len();
    let mut grad = vec![0.0; w.len()];
    let mut loss = 0.0;
    for (x, &t) in xs.iter().zip(ts) {
        let (out, a1, a2) = forward(h, g, w, x);
        let err = out - t;
        loss += err * err;
        let dout = 2.0 * err / n as f64;
        if h == 1 {
            for j in 0..g {
                let dz = dout * a1[j] * (1.0 - a1[j]);
                let row = &mut grad[j * (k + 1)..(j + 1) * (k + 1)];
                for i in 0..k {
                    row[i] += dz * x[i];
                }
                row[k] += dz;
            }
        } else {
            let base = g * (k + 1);
            let mut da1 = vec![0.0; g];
            for j in 0..g {
                let dz2 = dout * a2[j] * (1.0 - a2[j]);
                let w_row = &w[base + j * (g + 1)..base + (j + 1) * (g + 1)];
                for i in 0..g {
                    da1[i] += dz2 * w_row[i];
                }
                let g_row = &mut grad[base + j * (g + 1)..base + (j + 1) * (g + 1)];
                for i in 0..g {
                    g_row[i] += dz2 * a1[i];
                }
                g_row[g] += dz2;
            }
            for j in 0..g {
                let dz1 = da1[j] * a1[j] * (1.0 - a1[j]);
                let row = &mut grad[j * (k + 1)..(j + 1) * (k + 1)];
                for i in 0..k {
                    row[i] += dz1 * x[i];
                }
                row[k] += dz1;
            }
        }
    }
    (loss / n as f64, grad)
}

pub fn fit_mlp(data: &RegressionDataset, h: usize, g: usize, seed: u64) -> Result<MLPModel> {
    if !matches!(h, 1 | 2) {
        return Err(Error::InvalidHyper(format!("hidden layer count {h}, expected 1 or 2")));
    }
    if !matches!(g, 5 | 10) {
        return Err(Error::InvalidHyper(format!("units per layer {g}, expected 5 or 10")));
    }
    let n = data.n();
    if n < 10 {
        return Err(Error::TooFewRowsForMlp(n));
    }
    let k = data.k();

    // Standardization statistics from the full dataset.
    let mut x_mean = vec![0.0; k];
    let mut x_std = vec![0.0; k];
    for j in 0..k {
        let mean = data.x.iter().map(|r| r[j]).sum::<f64>() / n as f64;
        let var = data.x.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n as f64;
        x_mean[j] = mean;
        x_std[j] = var.sqrt();
    }
    let y_mean = data.y.iter().sum::<f64>() / n as f64;
    let y_std =
        (data.y.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / n as f64).sqrt();

    let offset = g as f64 / 2.0;
    let xs: Vec<Vec<f64>> = data
        .x
        .iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .map(|(j, v)| if x_std[j] > 0.0 { (v - x_mean[j]) / x_std[j] } else { 0.0 })
                .collect()
        })
        .collect();
    let ts: Vec<f64> = data
        .y
        .iter()
        .map(|v| if y_std > 0.0 { (v - y_mean) / y_std + offset } else { offset })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_val = ((n as f64 * VALIDATION_FRACTION).round() as usize).max(1);
    let (val_idx, train_idx) = order.split_at(n_val);

    let mut w: Vec<f64> =
        (0..param_count(h, g, k)).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let mut m = vec![0.0; w.len()];
    let mut v = vec![0.0; w.len()];
    let mut step = 0u64;

    let val_loss = |w: &[f64]| -> f64 {
        let se: f64 = val_idx
            .iter()
            .map(|&i| {
                let (out, ..) = forward(h, g, w, &xs[i]);
                (out - ts[i]).powi(2)
            })
            .sum();
        se / val_idx.len() as f64
    };

    let mut best_w = w.clone();
    let mut best_val = val_loss(&w);
    let mut epochs_since_best = 0;
    let mut train_order = train_idx.to_vec();

    for _epoch in 0..MAX_EPOCHS {
        train_order.shuffle(&mut rng);
        for batch in train_order.chunks(MINIBATCH) {
            let bx: Vec<Vec<f64>> = batch.iter().map(|&i| xs[i].clone()).collect();
            let bt: Vec<f64> = batch.iter().map(|&i| ts[i]).collect();
            let (_, grad) = batch_loss_and_grad(h, g, &w, &bx, &bt);
            step += 1;
            let b1t = 1.0 - ADAM_B1.powi(step as i32);
            let b2t = 1.0 - ADAM_B2.powi(step as i32);
            for i in 0..w.len() {
                m[i] = ADAM_B1 * m[i] + (1.0 - ADAM_B1) * grad[i];
                v[i] = ADAM_B2 * v[i] + (1.0 - ADAM_B2) * grad[i] * grad[i];
                w[i] -= ADAM_LR * (m[i] / b1t) / ((v[i] / b2t).sqrt() + ADAM_EPS);
            }
        }
        let vl = val_loss(&w);
        if vl < best_val - 1e-12 {
            best_val = vl;
            best_w = w.clone();
            epochs_since_best = 0;
        } else {
            epochs_since_best += 1;
            if epochs_since_best >= PATIENCE {
                break;
            }
        }
    }

    Ok(MLPModel {
        columns: data.columns.clone(),
        h,
        g,
        weights: best_w,
        x_mean,
        x_std,
        y_mean,
        y_std,
    })
}
