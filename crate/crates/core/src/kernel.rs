//! Product kernel `k = σ_f² · k_tool · k_ctx · k_time` over decision points.
//!
//! `k_tool` and `k_ctx` are exponentials of weighted L1 distances (plus
//! categorical mismatch penalties), so each factor is positive definite and so
//! is their product.

use nalgebra::{Cholesky, DMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{ActionDescriptor, ContextDescriptor, DecisionPoint};

/// Largest diagonal jitter tried before giving up on a Gram matrix.
pub const MAX_JITTER: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelParams {
    /// Weights on |Δ| of reversibility, sensitivity, blast radius,
    /// destructive flag, tier / 7.
    pub w_tool: [f64; 5],
    /// Penalty for differing tool ids.
    pub name_match_weight: f64,
    /// Weights on task mismatch, repo mismatch, |Δ session_phase|.
    pub w_ctx: [f64; 3],
    /// Time lengthscale in steps.
    pub lambda: f64,
    pub signal_variance: f64,
    pub jitter: f64,
}

impl Default for KernelParams {
    fn default() -> Self {
        Self {
            w_tool: [1.0, 1.0, 0.5, 1.0, 0.75],
            name_match_weight: 1.5,
            w_ctx: [1.0, 0.5, 0.25],
            lambda: 400.0,
            signal_variance: 1.0,
            jitter: 1e-9,
        }
    }
}

impl KernelParams {
    pub fn validate(&self) -> Result<()> {
        let weights_ok = self
            .w_tool
            .iter()
            .chain(&self.w_ctx)
            .chain(std::iter::once(&self.name_match_weight))
            .all(|w| w.is_finite() && *w >= 0.0);
        if !weights_ok {
            return Err(Error::Config("kernel weights must be finite and non-negative".into()));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::Config("kernel lambda must be positive".into()));
        }
        if !(self.signal_variance > 0.0) {
            return Err(Error::Config("kernel signal_variance must be positive".into()));
        }
        if !(self.jitter > 0.0 && self.jitter <= 1e-6) {
            return Err(Error::Config("kernel jitter must lie in (0, 1e-6]".into()));
        }
        Ok(())
    }
}

#[inline]
fn tool_distance(a: &ActionDescriptor, b: &ActionDescriptor, p: &KernelParams) -> f64 {
    let mut dist = if a.tool_id == b.tool_id { 0.0 } else { p.name_match_weight };
    let (xa, xb) = (a.attributes(), b.attributes());
    for i in 0..5 {
        dist += p.w_tool[i] * (xa[i] - xb[i]).abs();
    }
    dist
}

#[inline]
fn ctx_distance(a: &ContextDescriptor, b: &ContextDescriptor, p: &KernelParams) -> f64 {
    let mut dist = p.w_ctx[2] * (a.session_phase - b.session_phase).abs();
    if a.task_id != b.task_id {
        dist += p.w_ctx[0];
    }
    if a.repo_id != b.repo_id {
        dist += p.w_ctx[1];
    }
    dist
}

#[inline]
fn time_distance(t: u64, t_other: u64, p: &KernelParams) -> f64 {
    t.abs_diff(t_other) as f64 / p.lambda
}

pub fn k_tool(a: &ActionDescriptor, b: &ActionDescriptor, p: &KernelParams) -> f64 {
    (-tool_distance(a, b, p)).exp()
}

pub fn k_ctx(a: &ContextDescriptor, b: &ContextDescriptor, p: &KernelParams) -> f64 {
    (-ctx_distance(a, b, p)).exp()
}

pub fn k_time(t: u64, t_other: u64, p: &KernelParams) -> f64 {
    (-time_distance(t, t_other, p)).exp()
}

/// Full covariance between two decision points at their own timestamps.
pub fn k_full(x: &DecisionPoint, y: &DecisionPoint, p: &KernelParams) -> f64 {
    k_at(x, y, x.t, y.t, p)
}

/// Covariance with explicit time stamps, used when a stored point is compared
/// against "now" rather than its own step. The three factors are folded into
/// a single exponential.
#[inline]
pub fn k_at(x: &DecisionPoint, y: &DecisionPoint, tx: u64, ty: u64, p: &KernelParams) -> f64 {
    let dist =
        tool_distance(&x.action, &y.action, p) + ctx_distance(&x.context, &y.context, p) + time_distance(tx, ty, p);
    p.signal_variance * (-dist).exp()
}

/// Kernel matrix with `jitter` on the diagonal.
pub fn covariance_matrix(points: &[DecisionPoint], p: &KernelParams, jitter: f64) -> DMatrix<f64> {
    let n = points.len();
    let mut k = DMatrix::zeros(n, n);
    for j in 0..n {
        k[(j, j)] = p.signal_variance + jitter;
        for i in (j + 1)..n {
            let v = k_full(&points[i], &points[j], p);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Extends a jittered kernel matrix over `points[..n-1]`, minus its first
/// `dropped` rows and columns, by one trailing point. The result is
/// bit-identical to [`covariance_matrix`] over `points`.
pub fn extend_covariance(
    previous: &DMatrix<f64>,
    dropped: usize,
    points: &[DecisionPoint],
    p: &KernelParams,
    jitter: f64,
) -> DMatrix<f64> {
    let n = points.len();
    let kept = previous.nrows() - dropped;
    assert_eq!(kept + 1, n, "extend_covariance adds exactly one point");
    let mut k = DMatrix::zeros(n, n);
    k.view_mut((0, 0), (kept, kept)).copy_from(&previous.view((dropped, dropped), (kept, kept)));
    let last = n - 1;
    for j in 0..last {
        let v = k_full(&points[last], &points[j], p);
        k[(last, j)] = v;
        k[(j, last)] = v;
    }
    k[(last, last)] = p.signal_variance + jitter;
    k
}

/// Gram matrix with diagonal jitter, checked positive definite.
///
/// The jitter starts at `p.jitter` and is multiplied by ten until a Cholesky
/// factorisation succeeds or it would exceed [`MAX_JITTER`]. Returns the
/// matrix and the jitter actually used.
pub fn gram(points: &[DecisionPoint], p: &KernelParams) -> Result<(DMatrix<f64>, f64)> {
    if points.is_empty() {
        return Err(Error::Empty("gram needs at least one point"));
    }
    let mut k = covariance_matrix(points, p, p.jitter);
    let mut jitter = p.jitter;
    loop {
        if Cholesky::new(k.clone()).is_some() {
            return Ok((k, jitter));
        }
        let next = jitter * 10.0;
        if next > MAX_JITTER * (1.0 + 1e-12) {
            return Err(Error::Conditioning { jitter });
        }
        for i in 0..k.nrows() {
            k[(i, i)] = p.signal_variance + next;
        }
        jitter = next;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{ToolId, ToolRegistry};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn point(reg: &ToolRegistry, tool: u16, destr: bool, tier: u8, task: u8, t: u64) -> DecisionPoint {
        DecisionPoint {
            action: reg.action(ToolId(tool), destr, tier).unwrap(),
            context: ContextDescriptor { task_id: task, repo_id: 0, session_phase: t as f64 / 1500.0 },
            t,
        }
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize, reg: &ToolRegistry) -> Vec<DecisionPoint> {
        (0..n)
            .map(|_| {
                let tool = rng.random_range(0..18u16);
                let destr = reg.get(ToolId(tool)).unwrap().destructive_capable && rng.random_bool(0.5);
                let tier = rng.random_range(0..8u8);
                let task = rng.random_range(0..7u8);
                // small step range so duplicates and near-duplicates occur
                point(reg, tool, destr, tier, task, rng.random_range(0..40))
            })
            .collect()
    }

    #[test]
    fn self_similarity_is_one() {
        let reg = ToolRegistry::builtin();
        let p = KernelParams::default();
        let x = point(&reg, 11, true, 4, 3, 10);
        assert_eq!(k_tool(&x.action, &x.action, &p), 1.0);
        assert_eq!(k_ctx(&x.context, &x.context, &p), 1.0);
        assert_eq!(k_time(10, 10, &p), 1.0);
        assert_eq!(k_full(&x, &x, &p), p.signal_variance);
    }

    #[test]
    fn destructive_only_difference() {
        let reg = ToolRegistry::builtin();
        let mut p = KernelParams::default();
        p.w_tool[3] = std::f64::consts::LN_2;
        let sql = reg.by_name("execute_sql").unwrap().id;
        let drop = reg.action(sql, true, 3).unwrap();
        let select = reg.action(sql, false, 3).unwrap();
        assert_relative_eq!(k_tool(&drop, &select, &p), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn adjacent_tier_same_tool() {
        let reg = ToolRegistry::builtin();
        let p = KernelParams::default();
        let wf = reg.by_name("write_file").unwrap().id;
        let src = reg.action(wf, false, reg.tier_index("workspace_src").unwrap()).unwrap();
        let test = reg.action(wf, false, reg.tier_index("workspace_test").unwrap()).unwrap();
        // exp(-0.75 * 1/7), recomputed by hand
        let expected = (-0.75f64 / 7.0).exp();
        assert_relative_eq!(k_tool(&src, &test, &p), expected, epsilon = 1e-15);
        assert_relative_eq!(expected, 0.898_397_321_348_071, epsilon = 1e-12);
    }

    #[test]
    fn context_task_mismatch() {
        let p = KernelParams::default();
        let a = ContextDescriptor { task_id: 0, repo_id: 0, session_phase: 0.3 };
        let b = ContextDescriptor { task_id: 1, ..a };
        assert_relative_eq!(k_ctx(&a, &b, &p), (-1.0f64).exp(), epsilon = 1e-15);
        assert_relative_eq!(k_ctx(&a, &b, &p), 0.367_879_441_171_442_3, epsilon = 1e-12);
    }

    #[test]
    fn time_factor() {
        let p = KernelParams::default();
        assert_relative_eq!(k_time(0, 400, &p), (-1.0f64).exp(), epsilon = 1e-15);
        let slow = KernelParams { lambda: 1e9, ..p };
        assert!((k_time(0, 100, &slow) - 1.0).abs() < 1e-6);
        let x = (0..50u64).map(|d| k_time(0, d * 37, &p)).collect::<Vec<_>>();
        assert!(x.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn full_is_product_of_factors() {
        let reg = ToolRegistry::builtin();
        let p = KernelParams::default();
        let x = point(&reg, 3, false, 2, 1, 100);
        let y = point(&reg, 4, false, 1, 2, 300);
        let tool = (-(1.5 + 0.75 / 7.0f64)).exp();
        let ctx = (-(1.0 + 0.25 * 200.0 / 1500.0f64)).exp();
        let time = (-200.0f64 / 400.0).exp();
        assert_relative_eq!(k_full(&x, &y, &p), tool * ctx * time, epsilon = 1e-15);
        assert_relative_eq!(
            k_full(&x, &y, &p),
            k_tool(&x.action, &y.action, &p) * k_ctx(&x.context, &y.context, &p) * k_time(x.t, y.t, &p),
            epsilon = 1e-15
        );

        let far = point(&reg, 3, false, 2, 1, 100 + 100_000);
        assert!(k_full(&x, &far, &p) < 1e-100);
    }

    #[test]
    fn gram_small_cases() {
        let reg = ToolRegistry::builtin();
        let p = KernelParams::default();
        let x = point(&reg, 0, false, 0, 0, 5);
        let (k, jitter) = gram(&[x], &p).unwrap();
        assert_eq!(k.shape(), (1, 1));
        assert_eq!(k[(0, 0)], 1.0 + 1e-9);
        assert_eq!(jitter, 1e-9);

        let (k2, _) = gram(&[x, x], &p).unwrap();
        assert_eq!(k2[(0, 1)], 1.0);
        assert_eq!(k2[(1, 0)], 1.0);
        assert!(Cholesky::new(k2).is_some());
        assert!(matches!(gram(&[], &p), Err(Error::Empty(_))));
    }

    #[test]
    fn params_validation() {
        assert!(KernelParams::default().validate().is_ok());
        assert!(KernelParams { lambda: 0.0, ..Default::default() }.validate().is_err());
        assert!(KernelParams { jitter: 1e-3, ..Default::default() }.validate().is_err());
        let mut neg = KernelParams::default();
        neg.w_ctx[1] = -1.0;
        assert!(neg.validate().is_err());
    }

    #[test]
    fn random_gram_is_symmetric_and_factorisable() {
        let reg = ToolRegistry::builtin();
        let p = KernelParams::default();
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts = random_points(&mut rng, 20, &reg);
            let (k, _) = gram(&pts, &p).unwrap();
            assert_eq!(k, k.transpose());
        }
    }

    #[test]
    fn incremental_covariance_is_bit_identical() {
        let reg = ToolRegistry::builtin();
        let p = KernelParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts = random_points(&mut rng, 12, &reg);
        let full = covariance_matrix(&pts, &p, p.jitter);
        let head = covariance_matrix(&pts[..11], &p, p.jitter);
        assert_eq!(extend_covariance(&head, 0, &pts, &p, p.jitter), full);
        let shifted = covariance_matrix(&pts[1..], &p, p.jitter);
        assert_eq!(extend_covariance(&head, 1, &pts[1..], &p, p.jitter), shifted);
    }

    proptest! {
        #[test]
        fn symmetric_and_bounded(seed in any::<u64>()) {
            let reg = ToolRegistry::builtin();
            let p = KernelParams::default();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts = random_points(&mut rng, 2, &reg);
            let (a, b) = (&pts[0], &pts[1]);
            let kab = k_full(a, b, &p);
            prop_assert_eq!(kab.to_bits(), k_full(b, a, &p).to_bits());
            prop_assert!(kab > 0.0 && kab <= p.signal_variance);
        }
    }
}
