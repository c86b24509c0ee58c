//! Standard normal helpers and the probit log-likelihood derivatives.

use libm::erfc;

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Below this argument the ratio φ/Φ and log Φ switch to the Mills-ratio
/// continued fraction.
const TAIL_SWITCH: f64 = -6.0;

#[inline]
pub fn norm_pdf(z: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * z * z).exp()
}

#[inline]
pub fn norm_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Mills ratio `(1 - Φ(x)) / φ(x)` for `x >= 6`, by backward evaluation of
/// its continued fraction `1/(x + 1/(x + 2/(x + 3/(x + ...))))`.
fn mills_ratio_tail(x: f64) -> f64 {
    let mut acc = x;
    for k in (1..=60).rev() {
        acc = x + f64::from(k) / acc;
    }
    1.0 / acc
}

/// `log Φ(z)`, finite for every finite `z`.
pub fn log_norm_cdf(z: f64) -> f64 {
    if z < TAIL_SWITCH {
        -0.5 * z * z - LN_SQRT_2PI + mills_ratio_tail(-z).ln()
    } else {
        norm_cdf(z).ln()
    }
}

/// Inverse Mills ratio `φ(z) / Φ(z)`.
pub fn pdf_over_cdf(z: f64) -> f64 {
    if z < TAIL_SWITCH {
        1.0 / mills_ratio_tail(-z)
    } else {
        norm_pdf(z) / norm_cdf(z)
    }
}

/// Probit log-likelihood of one label and its first two derivatives in `f`.
///
/// Returns `(log p(y|f), d/df, -d²/df²)`. The curvature term is strictly
/// positive for every finite `f`.
#[inline]
pub fn probit_terms(f: f64, approve: bool) -> (f64, f64, f64) {
    let sign = if approve { 1.0 } else { -1.0 };
    let z = sign * f;
    let ratio = pdf_over_cdf(z);
    let curvature = ratio * (ratio + z);
    (log_norm_cdf(z), sign * ratio, curvature)
}
