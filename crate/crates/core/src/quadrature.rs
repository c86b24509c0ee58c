//! Brute-force predictive check by Gauss–Hermite quadrature.
//!
//! Recomputes the latent marginal at a query point with a dense solve of
//! `(K + W⁻¹)` instead of the Cholesky factor the posterior stores, then
//! integrates `Φ(f)` against that Gaussian numerically. Used to validate the
//! closed-form predictive probability.

use nalgebra::{DMatrix, DVector};

use crate::features::DecisionPoint;
use crate::inference::Posterior;
use crate::kernel;
use crate::probit::norm_cdf;

/// Gauss–Hermite rule for `∫ e^{-x²} g(x) dx`, nodes ascending.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    /// `n`-point rule; roots of the physicists' Hermite polynomial found by
    /// Newton's method on the orthonormal recurrence.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1);
        let pim4 = std::f64::consts::PI.powf(-0.25);
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        let nf = n as f64;
        let mut z = 0.0f64;
        for i in 0..m {
            z = match i {
                0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
                1 => z - 1.14 * nf.powf(0.426) / z,
                2 => 1.86 * z - 0.86 * nodes[0],
                3 => 1.91 * z - 0.91 * nodes[1],
                _ => 2.0 * z - nodes[i - 2],
            };
            let mut pp = 0.0;
            for _ in 0..100 {
                let mut p1 = pim4;
                let mut p2 = 0.0;
                for j in 0..n {
                    let p3 = p2;
                    p2 = p1;
                    let jf = j as f64;
                    p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
                }
                pp = (2.0 * nf).sqrt() * p2;
                let dz = p1 / pp;
                z -= dz;
                if dz.abs() <= 1e-15 {
                    break;
                }
            }
            nodes[i] = z;
            weights[i] = 2.0 / (pp * pp);
        }
        // the loop filled the positive half in descending order
        let mut pairs: Vec<(f64, f64)> = Vec::with_capacity(n);
        for i in 0..m {
            pairs.push((nodes[i], weights[i]));
            if !(n % 2 == 1 && i == m - 1) {
                pairs.push((-nodes[i], weights[i]));
            }
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        Self { nodes: pairs.iter().map(|p| p.0).collect(), weights: pairs.iter().map(|p| p.1).collect() }
    }

    /// `E[g(F)]` for `F ~ N(mean, var)`.
    pub fn gaussian_expectation(&self, mean: f64, var: f64, g: impl Fn(f64) -> f64) -> f64 {
        let scale = (2.0 * var).sqrt();
        let total: f64 = self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * g(mean + scale * x)).sum();
        total / std::f64::consts::PI.sqrt()
    }
}

/// Latent marginal at `x` via a dense LU solve of `(K + W⁻¹) u = k*`.
pub fn dense_latent(post: &Posterior, x: &DecisionPoint, t_now: u64) -> (f64, f64) {
    let params = post.params();
    let prior_var = kernel::k_at(x, x, t_now, t_now, params);
    if post.is_empty() {
        return (post.prior_mean(), prior_var);
    }
    let k_star = post.cross_covariance(x, t_now);
    let mean = post.prior_mean() + k_star.dot(post.grad());
    let n = post.len();
    let mut m: DMatrix<f64> = post.gram().clone();
    for i in 0..n {
        m[(i, i)] += 1.0 / post.hess_diag()[i];
    }
    let u: DVector<f64> = m.lu().solve(&k_star).expect("K + W⁻¹ is non-singular");
    (mean, (prior_var - k_star.dot(&u)).max(0.0))
}

/// Predictive approval probability by 64-point Gauss–Hermite quadrature of
/// `∫ Φ(f) N(f; μ*, σ*²) df`.
pub fn log_predictive_check(post: &Posterior, x: &DecisionPoint, t_now: u64) -> f64 {
    let (mean, var) = dense_latent(post, x, t_now);
    if var == 0.0 {
        return norm_cdf(mean);
    }
    GaussHermite::new(64).gaussian_expectation(mean, var, norm_cdf)
}
