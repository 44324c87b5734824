//! Exact Gaussian-process regression with a Matérn-5/2 kernel and the
//! expected-improvement acquisition.

use std::f64::consts::{PI, SQRT_2};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::stats::{mean, median, variance};

const JITTER: f64 = 1e-8;
const SQRT_5: f64 = 2.23606797749979;

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Matérn-5/2 covariance `s2 (1 + sqrt5 r + 5 r^2 / 3) exp(-sqrt5 r)` with
/// `r = |a - b| / length`.
pub fn matern52(a: &[f64], b: &[f64], signal_var: f64, length: f64) -> f64 {
    matern52_r(euclidean(a, b) / length, signal_var)
}

fn matern52_r(r: f64, signal_var: f64) -> f64 {
    let s = SQRT_5 * r;
    signal_var * (1.0 + s + s * s / 3.0) * (-s).exp()
}

/// Hyperparameter candidates as multipliers of data-derived scales: length
/// scales of the median pairwise input distance, variances of `var(y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpGrid {
    pub length: Vec<f64>,
    pub signal: Vec<f64>,
    pub noise: Vec<f64>,
}

impl Default for GpGrid {
    fn default() -> Self {
        GpGrid {
            length: vec![0.25, 0.5, 1.0, 2.0, 4.0, 8.0],
            signal: vec![0.5, 1.0, 2.0],
            noise: vec![1e-4, 1e-3, 1e-2, 1e-1],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpHyper {
    pub length: f64,
    pub signal_var: f64,
    pub noise_var: f64,
}

#[derive(Debug, Clone)]
pub struct GpModel {
    inputs: Vec<Vec<f64>>,
    y_mean: f64,
    hyper: GpHyper,
    /// `None` for the constant model.
    factor: Option<(Cholesky<f64, Dyn>, DVector<f64>)>,
    log_marginal: f64,
}

impl GpModel {
    pub fn hyper(&self) -> GpHyper {
        self.hyper
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        self.log_marginal
    }

    pub fn is_constant(&self) -> bool {
        self.factor.is_none()
    }

    /// Predictive mean and standard deviation (observation noise included).
    pub fn posterior(&self, x: &[f64]) -> (f64, f64) {
        let Some((chol, alpha)) = &self.factor else {
            return (self.y_mean, 0.0);
        };
        let h = self.hyper;
        let k = DVector::from_iterator(
            self.inputs.len(),
            self.inputs.iter().map(|xi| matern52(xi, x, h.signal_var, h.length)),
        );
        let mu = self.y_mean + k.dot(alpha);
        let v = chol
            .l_dirty()
            .solve_lower_triangular(&k)
            .expect("cholesky factor has a positive diagonal");
        let var = h.signal_var + h.noise_var - v.norm_squared();
        (mu, var.max(0.0).sqrt())
    }
}

fn pairwise_median(xs: &[Vec<f64>]) -> f64 {
    let mut d = Vec::new();
    for i in 0..xs.len() {
        for j in (i + 1)..xs.len() {
            d.push(euclidean(&xs[i], &xs[j]));
        }
    }
    let m = if d.is_empty() { 0.0 } else { median(&d) };
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

fn fit_one(xs: &[Vec<f64>], yc: &DVector<f64>, hyper: GpHyper) -> Option<(Cholesky<f64, Dyn>, DVector<f64>, f64)> {
    let n = xs.len();
    let dist = DMatrix::from_fn(n, n, |i, j| euclidean(&xs[i], &xs[j]));
    let mut k = dist.map(|d| matern52_r(d / hyper.length, hyper.signal_var));
    for i in 0..n {
        k[(i, i)] += hyper.noise_var + JITTER;
    }
    let chol = k.cholesky()?;
    let alpha = chol.solve(yc);
    let log_det: f64 = chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
    let lml = -0.5 * yc.dot(&alpha) - 0.5 * log_det - 0.5 * n as f64 * (2.0 * PI).ln();
    lml.is_finite().then_some((chol, alpha, lml))
}

/// Fits an exact GP by exhaustive grid search over the log marginal
/// likelihood (ties keep the smaller length scale). With fewer than two
/// points or constant targets the model is the constant mean with zero
/// predictive spread.
pub fn fit_gp(xs: &[Vec<f64>], ys: &[f64], grid: &GpGrid) -> GpModel {
    assert_eq!(xs.len(), ys.len(), "inputs and targets differ in length");
    let y_mean = match ys {
        [] => 0.0,
        [first, ..] if ys.iter().all(|y| y == first) => *first,
        _ => mean(ys),
    };
    let var_y = if ys.is_empty() { 0.0 } else { variance(ys) };
    let constant = GpModel {
        inputs: xs.to_vec(),
        y_mean,
        hyper: GpHyper {
            length: 1.0,
            signal_var: 0.0,
            noise_var: 0.0,
        },
        factor: None,
        log_marginal: f64::NAN,
    };
    if xs.len() < 2 || ys.iter().all(|&y| y == ys[0]) || !(var_y > 0.0) {
        return constant;
    }
    let base_len = pairwise_median(xs);
    let yc = DVector::from_iterator(ys.len(), ys.iter().map(|y| y - y_mean));
    let mut lengths = grid.length.clone();
    lengths.sort_by(f64::total_cmp);

    let mut best: Option<GpModel> = None;
    for &lm in &lengths {
        for &sm in &grid.signal {
            for &nm in &grid.noise {
                let hyper = GpHyper {
                    length: lm * base_len,
                    signal_var: sm * var_y,
                    noise_var: nm * var_y,
                };
                let Some((chol, alpha, lml)) = fit_one(xs, &yc, hyper) else {
                    continue;
                };
                if best.as_ref().is_none_or(|b| lml > b.log_marginal) {
                    best = Some(GpModel {
                        inputs: xs.to_vec(),
                        y_mean,
                        hyper,
                        factor: Some((chol, alpha)),
                        log_marginal: lml,
                    });
                }
            }
        }
    }
    best.unwrap_or(constant)
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / SQRT_2)
}

fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// Expected improvement over `y_plus`; `max(mu - y_plus, 0)` when `sigma = 0`.
pub fn expected_improvement(mu: f64, sigma: f64, y_plus: f64) -> f64 {
    let gap = mu - y_plus;
    if sigma <= 0.0 {
        return gap.max(0.0);
    }
    let z = gap / sigma;
    (gap * std_normal_cdf(z) + sigma * std_normal_pdf(z)).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matern_values() {
        let x = [0.3, -1.0];
        assert_eq!(matern52(&x, &x, 2.5, 0.7), 2.5);
        let s5 = 5f64.sqrt();
        let closed = (1.0 + s5 + 5.0 / 3.0) * (-s5).exp();
        assert!((matern52(&[0.0], &[1.0], 1.0, 1.0) - closed).abs() < 1e-9);
        assert_eq!(format!("{closed:.5}"), "0.52399");
        let mut prev = f64::INFINITY;
        for i in 0..200 {
            let v = matern52(&[0.0], &[i as f64 * 0.05], 1.0, 1.0);
            assert!(v < prev);
            prev = v;
        }
    }

    fn smooth(x: &[f64]) -> f64 {
        (x[0]).sin() + 0.5 * (x[1] * 0.7).cos()
    }

    fn noise_floor() -> GpGrid {
        GpGrid {
            noise: vec![1e-12],
            ..GpGrid::default()
        }
    }

    #[test]
    fn interpolates_noiseless_data() {
        let xs: Vec<Vec<f64>> = vec![vec![0.0, 0.0], vec![1.0, 0.5], vec![-0.7, 1.2], vec![2.0, -1.0], vec![0.3, 2.2]];
        let ys: Vec<f64> = xs.iter().map(|x| smooth(x)).collect();
        let gp = fit_gp(&xs, &ys, &noise_floor());
        for (x, y) in xs.iter().zip(&ys) {
            assert!((gp.posterior(x).0 - y).abs() < 1e-4);
        }
    }

    #[test]
    fn prior_reversion_and_variance_ordering() {
        let xs: Vec<Vec<f64>> = vec![vec![0.0, 0.0], vec![1.0, 0.5], vec![-0.7, 1.2], vec![2.0, -1.0]];
        let ys: Vec<f64> = xs.iter().map(|x| smooth(x)).collect();
        let gp = fit_gp(&xs, &ys, &GpGrid::default());
        let h = gp.hyper();
        let far = vec![1e4, 1e4];
        let (mu, sd) = gp.posterior(&far);
        assert!((mu - mean(&ys)).abs() < 1e-9);
        let prior = h.signal_var + h.noise_var;
        assert!((sd * sd - prior).abs() <= 0.01 * prior);
        let away = vec![xs[0][0] + 5.0 * h.length, xs[0][1]];
        assert!(gp.posterior(&xs[0]).1 <= gp.posterior(&away).1);
    }

    #[test]
    fn duplicate_inputs_and_degenerate_cases() {
        let xs = vec![vec![1.0], vec![1.0], vec![2.0]];
        let gp = fit_gp(&xs, &[0.1, 0.3, 0.5], &GpGrid::default());
        assert!(!gp.is_constant());
        assert!(gp.posterior(&[1.0]).1.is_finite());

        let flat = fit_gp(&xs, &[0.2, 0.2, 0.2], &GpGrid::default());
        assert!(flat.is_constant());
        assert_eq!(flat.posterior(&[7.0]), (0.2, 0.0));
        let single = fit_gp(&xs[..1], &[0.4], &GpGrid::default());
        assert_eq!(single.posterior(&[0.0]), (0.4, 0.0));
    }

    #[test]
    fn one_cell_grid_is_used() {
        let xs = vec![vec![0.0], vec![1.0], vec![3.0]];
        let ys = [0.0, 1.0, 0.5];
        let grid = GpGrid { length: vec![2.0], signal: vec![1.0], noise: vec![1e-2] };
        let gp = fit_gp(&xs, &ys, &grid);
        let base = median(&[1.0, 3.0, 2.0]);
        let v = variance(&ys);
        assert_eq!(gp.hyper(), GpHyper { length: 2.0 * base, signal_var: v, noise_var: 1e-2 * v });
    }

    #[test]
    fn grid_picks_likelihood_maximum() {
        let xs: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64 * 0.4, (i % 3) as f64]).collect();
        let ys: Vec<f64> = xs.iter().map(|x| smooth(x)).collect();
        let grid = GpGrid::default();
        let gp = fit_gp(&xs, &ys, &grid);
        for &l in &grid.length {
            for &s in &grid.signal {
                for &n in &grid.noise {
                    let cell = GpGrid { length: vec![l], signal: vec![s], noise: vec![n] };
                    assert!(fit_gp(&xs, &ys, &cell).log_marginal_likelihood() <= gp.log_marginal_likelihood());
                }
            }
        }
    }

    #[test]
    fn ei_closed_form_and_shape() {
        let phi0 = 1.0 / (2.0 * PI).sqrt();
        let v = expected_improvement(0.3, 0.5, 0.3);
        assert!((v - 0.5 * phi0).abs() < 1e-12);
        assert_eq!(format!("{v:.5}"), "0.19947");
        assert_eq!(expected_improvement(0.1, 0.0, 0.3), 0.0);
        assert_eq!(expected_improvement(0.5, 0.0, 0.3), 0.5 - 0.3);
        for i in 0..21 {
            let mu = -1.0 + 0.1 * i as f64;
            let mut prev = expected_improvement(mu, 0.0, 0.0);
            for j in 1..40 {
                let sigma = 0.05 * j as f64;
                let e = expected_improvement(mu, sigma, 0.0);
                assert!(e >= mu.max(0.0) - 1e-15);
                assert!(e >= prev - 1e-15, "mu {mu} sigma {sigma}");
                prev = e;
            }
        }
    }

    #[test]
    fn incumbent_has_no_more_ei_than_fresh_point() {
        let xs = vec![vec![0.0], vec![1.0], vec![2.5]];
        let ys = [0.1, 0.6, 0.3];
        let gp = fit_gp(&xs, &ys, &noise_floor());
        let (mu_inc, sd_inc) = gp.posterior(&xs[1]);
        // unmeasured point far away with the same mean: larger spread
        let far_sd = gp.hyper().signal_var.sqrt();
        assert!(sd_inc < far_sd);
        assert!(expected_improvement(mu_inc, sd_inc, 0.6) <= expected_improvement(mu_inc, far_sd, 0.6));
    }
}
