//! Laplace-approximate GP classification with a probit link.
//!
//! The mode of `Ψ(f) = log p(y|f) − ½ (f−μ₀)ᵀ K⁻¹ (f−μ₀)` is found by Newton's
//! method in the numerically stable `B = I + W^½ K W^½` form, and predictions
//! use the closed form `p̂ = Φ(μ* / √(1 + σ*²))`.

use std::collections::VecDeque;

use faer::dyn_stack::{MemBuffer, MemStack};
use faer::linalg::cholesky::llt::factor as llt;
use faer::{MatMut, Par};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::DecisionPoint;
use crate::kernel::{self, KernelParams};
use crate::probit::{norm_cdf, probit_terms};

/// Binary supervisor feedback.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Deny,
    Approve,
}

impl Label {
    pub fn is_approve(self) -> bool {
        matches!(self, Label::Approve)
    }

    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn flipped(self) -> Self {
        match self {
            Label::Deny => Label::Approve,
            Label::Approve => Label::Deny,
        }
    }
}

impl From<bool> for Label {
    fn from(approve: bool) -> Self {
        if approve {
            Label::Approve
        } else {
            Label::Deny
        }
    }
}

impl TryFrom<i64> for Label {
    type Error = Error;

    fn try_from(v: i64) -> Result<Self> {
        match v {
            0 => Ok(Label::Deny),
            1 => Ok(Label::Approve),
            other => Err(Error::InvalidLabel(other)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub x: DecisionPoint,
    pub y: Label,
}

/// Sliding window over the most recent feedback records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSet {
    records: VecDeque<FeedbackRecord>,
    capacity: usize,
}

impl TrainingSet {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "window capacity must be positive");
        Self { records: VecDeque::with_capacity(capacity.min(4096)), capacity }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> impl ExactSizeIterator<Item = &FeedbackRecord> + '_ {
        self.records.iter()
    }

    pub fn latest_t(&self) -> Option<u64> {
        self.records.back().map(|r| r.x.t)
    }

    /// Appends a record, evicting the oldest one when the window is full.
    /// Timestamps must be non-decreasing.
    pub fn push(&mut self, record: FeedbackRecord) -> Result<Option<FeedbackRecord>> {
        if let Some(last) = self.latest_t() {
            if record.x.t < last {
                return Err(Error::InvalidDescriptor(format!(
                    "feedback at step {} precedes latest record at step {last}",
                    record.x.t
                )));
            }
        }
        let evicted = if self.records.len() == self.capacity { self.records.pop_front() } else { None };
        self.records.push_back(record);
        Ok(evicted)
    }

    pub fn points(&self) -> Vec<DecisionPoint> {
        self.records.iter().map(|r| r.x).collect()
    }

    pub fn labels(&self) -> Vec<Label> {
        self.records.iter().map(|r| r.y).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NewtonSettings {
    /// Stop when the largest coordinate change falls below this.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for NewtonSettings {
    fn default() -> Self {
        Self { tolerance: 1e-8, max_iterations: 50 }
    }
}

/// Gaussian approximation of `p(f | D)` at its mode.
#[derive(Debug, Clone)]
pub struct Posterior {
    points: Vec<DecisionPoint>,
    labels: Vec<Label>,
    mode: DVector<f64>,
    grad: DVector<f64>,
    hess_diag: DVector<f64>,
    sqrt_hess: DVector<f64>,
    /// `a` with `f̂ − μ₀ = K a`
    alpha: DVector<f64>,
    chol: DMatrix<f64>,
    gram: DMatrix<f64>,
    prior_mean: f64,
    params: KernelParams,
    converged: bool,
    iterations: usize,
    log_objective: f64,
}

/// Latent and predictive summary at one query point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub mu_star: f64,
    pub var_star: f64,
    pub p_hat: f64,
}

impl Prediction {
    pub fn from_latent(mu_star: f64, var_star: f64) -> Self {
        Self { mu_star, var_star, p_hat: norm_cdf(mu_star / (1.0 + var_star).sqrt()) }
    }
}

impl Posterior {
    /// Posterior with no data: the GP prior itself.
    pub fn prior(params: KernelParams, prior_mean: f64) -> Self {
        Self {
            points: Vec::new(),
            labels: Vec::new(),
            mode: DVector::zeros(0),
            grad: DVector::zeros(0),
            hess_diag: DVector::zeros(0),
            sqrt_hess: DVector::zeros(0),
            alpha: DVector::zeros(0),
            chol: DMatrix::zeros(0, 0),
            gram: DMatrix::zeros(0, 0),
            prior_mean,
            params,
            converged: true,
            iterations: 0,
            log_objective: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[DecisionPoint] {
        &self.points
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn mode(&self) -> &DVector<f64> {
        &self.mode
    }

    /// `∇ log p(y | f̂)`
    pub fn grad(&self) -> &DVector<f64> {
        &self.grad
    }

    /// `−∂² log p(y | f) / ∂f²` at the mode.
    pub fn hess_diag(&self) -> &DVector<f64> {
        &self.hess_diag
    }

    /// Lower Cholesky factor of `I + W^½ K W^½`.
    pub fn chol(&self) -> &DMatrix<f64> {
        &self.chol
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn prior_mean(&self) -> f64 {
        self.prior_mean
    }

    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    pub fn converged(&self) -> bool {
        self.converged
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    /// `Ψ(f̂)` up to the constant log-determinant of the prior.
    pub fn log_objective(&self) -> f64 {
        self.log_objective
    }

    /// `‖∇ log p(y|f̂) − K⁻¹(f̂ − μ₀)‖∞`, the gradient of `Ψ` at the mode.
    pub fn stationarity_residual(&self) -> f64 {
        (&self.grad - &self.alpha).amax()
    }

    /// Cross-covariances between `x` (evaluated at `t_now`) and the training
    /// points at their own steps.
    pub fn cross_covariance(&self, x: &DecisionPoint, t_now: u64) -> DVector<f64> {
        DVector::from_iterator(
            self.points.len(),
            self.points.iter().map(|xi| kernel::k_at(x, xi, t_now, xi.t, &self.params)),
        )
    }

    /// Latent mean and variance at `x`, with time decay measured from `t_now`.
    pub fn latent(&self, x: &DecisionPoint, t_now: u64) -> (f64, f64) {
        let prior_var = kernel::k_at(x, x, t_now, t_now, &self.params);
        if self.points.is_empty() {
            return (self.prior_mean, prior_var);
        }
        let k_star = self.cross_covariance(x, t_now);
        let mu = self.prior_mean + k_star.dot(&self.grad);
        let rhs = self.sqrt_hess.component_mul(&k_star);
        let v = self.chol.solve_lower_triangular(&rhs).expect("cholesky factor has a positive diagonal");
        let raw = prior_var - v.norm_squared();
        if raw < 0.0 {
            tracing::debug!(raw, "clamped negative predictive variance");
        }
        (mu, raw.max(0.0))
    }
}

/// Newton iteration to the posterior mode.
pub fn fit_laplace(
    data: &TrainingSet,
    params: &KernelParams,
    prior_mean: f64,
    settings: &NewtonSettings,
) -> Result<Posterior> {
    if data.is_empty() {
        return Err(Error::Empty("fit_laplace needs at least one record"));
    }
    let points = data.points();
    let gram = kernel::covariance_matrix(&points, params, params.jitter);
    fit_from_gram(points, data.labels(), gram, params, prior_mean, settings)
}

/// Same result as [`fit_laplace`], reusing the kernel matrix of `previous`
/// when `data` is its window shifted by at most one eviction plus one new
/// record. Falls back to a full fit otherwise.
pub fn refit(
    previous: &Posterior,
    data: &TrainingSet,
    params: &KernelParams,
    prior_mean: f64,
    settings: &NewtonSettings,
) -> Result<Posterior> {
    let points = data.points();
    let n = points.len();
    let old = previous.points.len();
    let shifted = old > 0
        && (n == old + 1 || n == old)
        && previous.params == *params
        && previous.points[old + 1 - n..] == points[..n - 1];
    // a stored matrix with escalated jitter is not reused
    let default_diag = params.signal_variance + params.jitter;
    if !shifted || (0..old).any(|i| previous.gram[(i, i)] != default_diag) {
        return fit_laplace(data, params, prior_mean, settings);
    }
    let dropped = old + 1 - n;
    let gram = kernel::extend_covariance(&previous.gram, dropped, &points, params, params.jitter);
    fit_from_gram(points, data.labels(), gram, params, prior_mean, settings)
}

/// Runs Newton on `gram`; if the inner factorisation breaks down, retries
/// with the escalated-jitter Gram matrix.
fn fit_from_gram(
    points: Vec<DecisionPoint>,
    labels: Vec<Label>,
    gram: DMatrix<f64>,
    params: &KernelParams,
    prior_mean: f64,
    settings: &NewtonSettings,
) -> Result<Posterior> {
    match newton(&points, &labels, &gram, settings, prior_mean) {
        Ok(fit) => Ok(fit.into_posterior(points, labels, gram, params, prior_mean)),
        Err(NewtonFailure::Factorisation) => {
            let (gram, jitter) = kernel::gram(&points, params)?;
            match newton(&points, &labels, &gram, settings, prior_mean) {
                Ok(fit) => Ok(fit.into_posterior(points, labels, gram, params, prior_mean)),
                Err(NewtonFailure::Factorisation) => Err(Error::Conditioning { jitter }),
                Err(NewtonFailure::Stalled(e)) => Err(e),
            }
        }
        Err(NewtonFailure::Stalled(e)) => Err(e),
    }
}

struct Curvature {
    log_lik: f64,
    grad: DVector<f64>,
    hess: DVector<f64>,
}

fn curvature(h: &DVector<f64>, labels: &[Label], prior_mean: f64) -> Curvature {
    let n = labels.len();
    let mut grad = DVector::zeros(n);
    let mut hess = DVector::zeros(n);
    let mut log_lik = 0.0;
    for i in 0..n {
        let (lp, g, w) = probit_terms(prior_mean + h[i], labels[i].is_approve());
        log_lik += lp;
        grad[i] = g;
        hess[i] = w;
    }
    Curvature { log_lik, grad, hess }
}

/// Lower factor of `I + diag(s) K diag(s)`, zero above the diagonal.
fn factor_b(gram: &DMatrix<f64>, sqrt_hess: &DVector<f64>) -> Option<DMatrix<f64>> {
    let n = gram.nrows();
    let mut b = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in j..n {
            b[(i, j)] = sqrt_hess[i] * gram[(i, j)] * sqrt_hess[j];
        }
        b[(j, j)] += 1.0;
    }
    let mut buf = MemBuffer::new(llt::cholesky_in_place_scratch::<f64>(n, Par::Seq, Default::default()));
    let view = MatMut::from_column_major_slice_mut(b.as_mut_slice(), n, n);
    let info = llt::cholesky_in_place(
        view,
        llt::LltRegularization::default(),
        Par::Seq,
        MemStack::new(&mut buf),
        Default::default(),
    );
    if info.is_err() {
        return None;
    }
    b.fill_upper_triangle(0.0, 1);
    Some(b)
}

enum NewtonFailure {
    Factorisation,
    Stalled(Error),
}

struct NewtonFit {
    h: DVector<f64>,
    alpha: DVector<f64>,
    curvature: Curvature,
    sqrt_hess: DVector<f64>,
    chol: DMatrix<f64>,
    iterations: usize,
    objective: f64,
}

impl NewtonFit {
    fn into_posterior(
        self,
        points: Vec<DecisionPoint>,
        labels: Vec<Label>,
        gram: DMatrix<f64>,
        params: &KernelParams,
        prior_mean: f64,
    ) -> Posterior {
        Posterior {
            points,
            labels,
            mode: self.h.add_scalar(prior_mean),
            grad: self.curvature.grad,
            hess_diag: self.curvature.hess,
            sqrt_hess: self.sqrt_hess,
            alpha: self.alpha,
            chol: self.chol,
            gram,
            prior_mean,
            params: *params,
            converged: true,
            iterations: self.iterations,
            log_objective: self.objective,
        }
    }
}

fn newton(
    points: &[DecisionPoint],
    labels: &[Label],
    gram: &DMatrix<f64>,
    settings: &NewtonSettings,
    prior_mean: f64,
) -> std::result::Result<NewtonFit, NewtonFailure> {
    let n = points.len();
    // h = f − μ₀, kept alongside a with h = K a
    let mut h = DVector::<f64>::zeros(n);
    let mut alpha = DVector::<f64>::zeros(n);
    let mut cur = curvature(&h, labels, prior_mean);
    let mut objective = cur.log_lik;
    let mut last_step = f64::INFINITY;

    for iteration in 1..=settings.max_iterations {
        let sqrt_hess = cur.hess.map(f64::sqrt);
        let chol = factor_b(gram, &sqrt_hess).ok_or(NewtonFailure::Factorisation)?;
        let b = cur.hess.component_mul(&h) + &cur.grad;
        let kb = gram * &b;
        let z = chol.solve_lower_triangular(&sqrt_hess.component_mul(&kb)).expect("positive diagonal");
        let z = chol.tr_solve_lower_triangular(&z).expect("positive diagonal");
        let alpha_full = &b - sqrt_hess.component_mul(&z);
        let h_full = gram * &alpha_full;

        // Newton on a concave objective; halve the step if Ψ would drop.
        let mut step = 1.0;
        let (next_h, next_alpha, next_cur, next_obj) = loop {
            let (cand_h, cand_alpha) = if step == 1.0 {
                (h_full.clone(), alpha_full.clone())
            } else {
                (&h + (&h_full - &h) * step, &alpha + (&alpha_full - &alpha) * step)
            };
            let cand = curvature(&cand_h, labels, prior_mean);
            let obj = cand.log_lik - 0.5 * cand_alpha.dot(&cand_h);
            if obj >= objective - 1e-12 * objective.abs().max(1.0) || step < 1e-6 {
                break (cand_h, cand_alpha, cand, obj);
            }
            step *= 0.5;
        };
        last_step = (&next_h - &h).amax();
        h = next_h;
        alpha = next_alpha;
        cur = next_cur;
        objective = next_obj;

        if last_step < settings.tolerance {
            let sqrt_hess = cur.hess.map(f64::sqrt);
            let chol = factor_b(gram, &sqrt_hess).ok_or(NewtonFailure::Factorisation)?;
            return Ok(NewtonFit { h, alpha, curvature: cur, sqrt_hess, chol, iterations: iteration, objective });
        }
    }
    Err(NewtonFailure::Stalled(Error::NonConvergence {
        iterations: settings.max_iterations,
        last_step,
        last_mode: h.add_scalar(prior_mean).iter().copied().collect(),
    }))
}

/// Predictive approval probability at `x`, with cross-covariances decayed
/// from `t_now`.
pub fn predict(post: &Posterior, x: &DecisionPoint, t_now: u64) -> Prediction {
    let (mu, var) = post.latent(x, t_now);
    Prediction::from_latent(mu, var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{ContextDescriptor, ToolId, ToolRegistry};
    use crate::probit::norm_pdf;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn point(tool: u16, tier: u8, task: u8, t: u64) -> DecisionPoint {
        let reg = ToolRegistry::builtin();
        DecisionPoint {
            action: reg.action(ToolId(tool), false, tier).unwrap(),
            context: ContextDescriptor { task_id: task, repo_id: 0, session_phase: 0.0 },
            t,
        }
    }

    fn set(records: &[(DecisionPoint, Label)]) -> TrainingSet {
        let mut s = TrainingSet::new(64);
        for &(x, y) in records {
            s.push(FeedbackRecord { x, y }).unwrap();
        }
        s
    }

    fn fit(records: &[(DecisionPoint, Label)]) -> Posterior {
        fit_laplace(&set(records), &KernelParams::default(), 0.0, &NewtonSettings::default()).unwrap()
    }

    /// Bisection on `f = k φ(f)/Φ(f)`, the 1-D stationarity condition.
    fn single_mode_oracle(k: f64) -> f64 {
        let g = |f: f64| f - k * norm_pdf(f) / norm_cdf(f);
        let (mut lo, mut hi) = (0.0, 2.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if g(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn single_observation_mode() {
        let x = point(0, 0, 0, 0);
        let k = 1.0 + KernelParams::default().jitter;
        let oracle = single_mode_oracle(k);
        assert_relative_eq!(oracle, 0.506, epsilon = 1e-3);

        let up = fit(&[(x, Label::Approve)]);
        assert!(up.converged());
        assert_relative_eq!(up.mode()[0], oracle, epsilon = 1e-9);
        let down = fit(&[(x, Label::Deny)]);
        assert_relative_eq!(down.mode()[0], -oracle, epsilon = 1e-9);
    }

    #[test]
    fn conflicting_pair_cancels() {
        let x = point(5, 2, 1, 3);
        let post = fit(&[(x, Label::Approve), (x, Label::Deny)]);
        // grid oracle on Ψ over (f1, f2) with K = [[1+j,1],[1,1+j]]: by symmetry
        // the maximiser is the origin
        assert!(post.mode().amax() < 1e-9);
        assert_relative_eq!(predict(&post, &x, 3).p_hat, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn empty_posterior_is_prior() {
        let post = Posterior::prior(KernelParams::default(), 0.0);
        let pred = predict(&post, &point(3, 1, 0, 10), 10);
        assert_eq!(pred.mu_star, 0.0);
        assert_eq!(pred.var_star, 1.0);
        assert_relative_eq!(pred.p_hat, 0.5);
        assert!(fit_laplace(&TrainingSet::new(4), &KernelParams::default(), 0.0, &NewtonSettings::default()).is_err());
    }

    #[test]
    fn stale_evidence_decays_to_prior() {
        let x = point(3, 1, 0, 0);
        let post = fit(&[(x, Label::Approve)]);
        let lambda = KernelParams::default().lambda as u64;
        let fresh = predict(&post, &x, 0).p_hat;
        let later = predict(&post, &DecisionPoint { t: 10 * lambda, ..x }, 10 * lambda).p_hat;
        assert!(fresh > 0.6);
        assert!((later - 0.5).abs() < 1e-2);
    }

    #[test]
    fn non_convergence_is_reported() {
        let x = point(0, 0, 0, 0);
        let settings = NewtonSettings { tolerance: 0.0, max_iterations: 3 };
        let err = fit_laplace(&set(&[(x, Label::Approve)]), &KernelParams::default(), 0.0, &settings).unwrap_err();
        match err {
            Error::NonConvergence { iterations, last_mode, .. } => {
                assert_eq!(iterations, 3);
                assert_eq!(last_mode.len(), 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn incremental_refit_matches_full_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let recs = random_records(&mut rng, 30);
        let params = KernelParams::default();
        let settings = NewtonSettings::default();
        let mut window = TrainingSet::new(10);
        let mut post = Posterior::prior(params, 0.0);
        for &(x, y) in &recs {
            window.push(FeedbackRecord { x, y }).unwrap();
            post = refit(&post, &window, &params, 0.0, &settings).unwrap();
            let full = fit_laplace(&window, &params, 0.0, &settings).unwrap();
            assert_eq!(post.gram(), full.gram());
            assert_eq!(post.mode(), full.mode());
        }
    }

    #[test]
    fn window_evicts_oldest() {
        let mut s = TrainingSet::new(1);
        let a = FeedbackRecord { x: point(0, 0, 0, 1), y: Label::Approve };
        let b = FeedbackRecord { x: point(1, 0, 0, 2), y: Label::Deny };
        assert_eq!(s.push(a).unwrap(), None);
        assert_eq!(s.push(b).unwrap(), Some(a));
        assert_eq!(s.len(), 1);
        assert_eq!(s.records().next(), Some(&b));
        let stale = FeedbackRecord { x: point(1, 0, 0, 0), y: Label::Deny };
        assert!(s.push(stale).is_err());
    }

    #[test]
    fn label_contract() {
        assert_eq!(Label::try_from(1).unwrap(), Label::Approve);
        assert_eq!(Label::try_from(0).unwrap(), Label::Deny);
        assert!(matches!(Label::try_from(2), Err(Error::InvalidLabel(2))));
    }

    fn random_records(rng: &mut ChaCha8Rng, n: usize) -> Vec<(DecisionPoint, Label)> {
        let mut t = 0;
        (0..n)
            .map(|_| {
                t += rng.random_range(0..30);
                let x = point(rng.random_range(0..18), rng.random_range(0..8), rng.random_range(0..7), t);
                (x, Label::from(rng.random_bool(0.6)))
            })
            .collect()
    }

    #[test]
    fn mode_is_stationary() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let n = rng.random_range(1..40);
            let recs = random_records(&mut rng, n);
            let post = fit(&recs);
            // independent check: solve K x = f̂ − μ₀ directly
            let h = post.mode().add_scalar(-post.prior_mean());
            let kinv_h = post.gram().clone().lu().solve(&h).unwrap();
            let residual = (post.grad() - kinv_h).amax();
            assert!(residual < 1e-6, "residual {residual}");
            assert!(post.stationarity_residual() < 1e-6);
            assert!(post.hess_diag().iter().all(|&w| w > 0.0));
            let l = post.chol();
            assert!((0..l.nrows()).all(|i| l[(i, i)] > 0.0 && (i + 1..l.ncols()).all(|j| l[(i, j)] == 0.0)));
        }
    }

    #[test]
    fn label_flip_antisymmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..30 {
            let n = rng.random_range(1..25);
            let recs = random_records(&mut rng, n);
            let flipped: Vec<_> = recs.iter().map(|&(x, y)| (x, y.flipped())).collect();
            let a = fit(&recs);
            let b = fit(&flipped);
            for i in 0..n {
                assert!((a.mode()[i] + b.mode()[i]).abs() < 1e-12);
            }
            let probe = recs[n / 2].0;
            let pa = predict(&a, &probe, probe.t + 5).p_hat;
            let pb = predict(&b, &probe, probe.t + 5).p_hat;
            assert!((pa - (1.0 - pb)).abs() < 1e-9);
        }
    }

    #[test]
    fn approval_never_lowers_prediction() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let n = rng.random_range(1..15);
            let mut recs = random_records(&mut rng, n);
            let t = recs.last().unwrap().0.t + 1;
            let x = point(rng.random_range(0..18), rng.random_range(0..8), rng.random_range(0..7), t);
            let before = predict(&fit(&recs), &x, t).p_hat;
            recs.push((x, Label::Approve));
            let after = predict(&fit(&recs), &x, t).p_hat;
            assert!(after > before, "{after} <= {before}");
        }
    }

    #[test]
    fn variance_stays_non_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..30 {
            let recs = random_records(&mut rng, 30);
            let post = fit(&recs);
            for (x, _) in &recs {
                let (_, var) = post.latent(x, x.t);
                assert!(var >= 0.0);
                // raw value before clamping is at most jitter-scale negative
                let k_star = post.cross_covariance(x, x.t);
                let v = post
                    .chol()
                    .solve_lower_triangular(&post.hess_diag().map(f64::sqrt).component_mul(&k_star))
                    .unwrap();
                assert!(1.0 - v.norm_squared() > -1e-6);
            }
        }
    }
}
