//! Robust linear screening model predicting the high-fidelity score from a
//! low-fidelity observation, log-memory and the ordinal embedding.
//!
//! Fit by iteratively reweighted least squares on the Huber loss with a
//! ridge penalty on the (standardized) slope coefficients. The intercept is
//! not penalized.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::space::Embedding;

pub const DEFAULT_MIN_PAIRS: usize = 8;
pub const DEFAULT_HUBER_DELTA: f64 = 0.01;
pub const DEFAULT_RIDGE: f64 = 0.1;

const MAX_ITERATIONS: usize = 100;
const TOLERANCE: f64 = 1e-8;
const MAX_RIDGE_ESCALATIONS: usize = 3;

/// `[P(C; T_s), ln M(C), embedding...]`
pub fn screening_features(lf_score: f64, memory_bytes: u64, embedding: &Embedding) -> Vec<f64> {
    let mut x = Vec::with_capacity(2 + embedding.0.len());
    x.push(lf_score);
    x.push((memory_bytes as f64).ln());
    x.extend_from_slice(&embedding.0);
    x
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub features: Vec<f64>,
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningSurrogate {
    pub huber_delta: f64,
    pub ridge: f64,
    pub pairs: usize,
    fit: Option<LinearFit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LinearFit {
    mean: Vec<f64>,
    scale: Vec<f64>,
    intercept: f64,
    weights: Vec<f64>,
    iterations: usize,
}

impl ScreeningSurrogate {
    pub fn untrained(huber_delta: f64, ridge: f64, pairs: usize) -> Self {
        ScreeningSurrogate {
            huber_delta,
            ridge,
            pairs,
            fit: None,
        }
    }

    pub fn is_trained(&self) -> bool {
        self.fit.is_some()
    }

    pub fn iterations(&self) -> Option<usize> {
        self.fit.as_ref().map(|f| f.iterations)
    }

    pub fn predict(&self, features: &[f64]) -> Option<f64> {
        let fit = self.fit.as_ref()?;
        let mut y = fit.intercept;
        for (j, x) in features.iter().enumerate() {
            y += fit.weights[j] * (x - fit.mean[j]) / fit.scale[j];
        }
        Some(y)
    }
}

/// Fits the screening model; returns an untrained model with fewer than
/// `min_pairs` pairs or when the normal equations stay singular.
pub fn fit_screening_surrogate(
    pairs: &[TrainingPair],
    huber_delta: f64,
    ridge: f64,
    min_pairs: usize,
) -> ScreeningSurrogate {
    let untrained = ScreeningSurrogate::untrained(huber_delta, ridge, pairs.len());
    if pairs.len() < min_pairs.max(1) {
        return untrained;
    }
    let n = pairs.len();
    let p = pairs[0].features.len();
    if pairs.iter().any(|t| t.features.len() != p) {
        return untrained;
    }

    let mut mean = vec![0.0; p];
    let mut scale = vec![1.0; p];
    for j in 0..p {
        let col: Vec<f64> = pairs.iter().map(|t| t.features[j]).collect();
        let m = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n as f64;
        mean[j] = m;
        // constant columns standardize to zero
        scale[j] = if var > 0.0 { var.sqrt() } else { f64::INFINITY };
    }
    let design = DMatrix::from_fn(n, p + 1, |i, j| {
        if j == 0 {
            1.0
        } else {
            let s = scale[j - 1];
            if s.is_finite() {
                (pairs[i].features[j - 1] - mean[j - 1]) / s
            } else {
                0.0
            }
        }
    });
    let target = DVector::from_iterator(n, pairs.iter().map(|t| t.target));

    let mut lambda = ridge;
    for _ in 0..=MAX_RIDGE_ESCALATIONS {
        if let Some((theta, iterations)) = irls(&design, &target, huber_delta, lambda) {
            let weights: Vec<f64> = theta
                .iter()
                .skip(1)
                .zip(&scale)
                .map(|(&w, s)| if s.is_finite() { w } else { 0.0 })
                .collect();
            let scale = scale.iter().map(|&s| if s.is_finite() { s } else { 1.0 }).collect();
            return ScreeningSurrogate {
                huber_delta,
                ridge: lambda,
                pairs: n,
                fit: Some(LinearFit {
                    mean,
                    scale,
                    intercept: theta[0],
                    weights,
                    iterations,
                }),
            };
        }
        lambda = if lambda > 0.0 { lambda * 10.0 } else { 1e-8 };
    }
    untrained
}

fn irls(x: &DMatrix<f64>, y: &DVector<f64>, delta: f64, lambda: f64) -> Option<(DVector<f64>, usize)> {
    let (n, p) = x.shape();
    let mut w = DVector::from_element(n, 1.0);
    let mut theta = DVector::zeros(p);
    for it in 1..=MAX_ITERATIONS {
        let mut xtwx = DMatrix::zeros(p, p);
        let mut xtwy = DVector::zeros(p);
        for i in 0..n {
            let row = x.row(i);
            xtwx += w[i] * row.transpose() * row;
            xtwy += w[i] * y[i] * row.transpose();
        }
        for j in 1..p {
            xtwx[(j, j)] += 2.0 * lambda;
        }
        let next = xtwx.cholesky()?.solve(&xtwy);
        let change = (&next - &theta).amax();
        theta = next;
        let resid = y - x * &theta;
        for i in 0..n {
            let a = resid[i].abs();
            w[i] = if a <= delta { 1.0 } else { delta / a };
        }
        if change < TOLERANCE {
            return Some((theta, it));
        }
    }
    Some((theta, MAX_ITERATIONS))
}
