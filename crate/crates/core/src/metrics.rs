//! Per-step log rows and the scores computed from them.

use serde::{Deserialize, Serialize};

use crate::config::Phase;
use crate::error::{Error, Result};
use crate::gateway::Verdict;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Gateway,
    Independent,
    AlwaysEscalate,
    RandomAcquisition,
}

impl Arm {
    pub fn as_str(self) -> &'static str {
        match self {
            Arm::Gateway => "gateway",
            Arm::Independent => "independent",
            Arm::AlwaysEscalate => "always_escalate",
            Arm::RandomAcquisition => "random_acquisition",
        }
    }
}

/// One prequential step for one arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub seed: u64,
    pub arm: Arm,
    pub t: u64,
    pub phase: Phase,
    pub tool: String,
    pub tier: u8,
    pub task: u8,
    pub destructive: bool,
    pub verdict: Verdict,
    pub p_hat: f64,
    /// Latent moments; empty for arms without a latent model.
    pub mu_star: Option<f64>,
    pub var_star: Option<f64>,
    pub true_prob: f64,
    /// Label the scores are computed against.
    pub truth: bool,
    /// Sampled label, present only when revealed to the arm.
    pub y: Option<u8>,
    pub queried: bool,
    pub heldout: bool,
}

/// Scores for one (phase, arm) slice of a log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseMetrics {
    /// `None` when nothing was auto-decided.
    pub auto_accuracy: Option<f64>,
    /// `None` when nothing was allowed.
    pub false_allow_rate: Option<f64>,
    pub auto_fraction: f64,
    pub ask_fraction: f64,
    pub prob_rmse: f64,
    pub ece: f64,
}

/// Expected calibration error over `bins` equal-width bins of `p̂`.
/// Pairs are `(p̂, true probability)`.
pub fn ece(pairs: &[(f64, f64)], bins: usize) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("ece needs at least one pair"));
    }
    if bins == 0 {
        return Err(Error::Config("ece needs at least one bin".into()));
    }
    let mut sum_p = vec![0.0; bins];
    let mut sum_q = vec![0.0; bins];
    let mut count = vec![0usize; bins];
    for &(p, q) in pairs {
        let b = ((p * bins as f64).floor() as usize).min(bins - 1);
        sum_p[b] += p;
        sum_q[b] += q;
        count[b] += 1;
    }
    let n = pairs.len() as f64;
    Ok((0..bins).filter(|&b| count[b] > 0).map(|b| (sum_p[b] - sum_q[b]).abs() / n).sum())
}

pub fn rmse(pairs: &[(f64, f64)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    (pairs.iter().map(|(p, q)| (p - q).powi(2)).sum::<f64>() / pairs.len() as f64).sqrt()
}

pub fn phase_metrics<'a>(rows: impl IntoIterator<Item = &'a StepRow>, bins: usize) -> Result<PhaseMetrics> {
    let (mut n, mut allow, mut block, mut false_allow, mut false_block) = (0usize, 0usize, 0usize, 0usize, 0usize);
    let mut pairs = Vec::new();
    for row in rows {
        n += 1;
        pairs.push((row.p_hat, row.true_prob));
        match row.verdict {
            Verdict::Allow => {
                allow += 1;
                false_allow += usize::from(!row.truth);
            }
            Verdict::Block => {
                block += 1;
                false_block += usize::from(row.truth);
            }
            Verdict::Ask => {}
        }
    }
    if n == 0 {
        return Err(Error::Empty("phase has no steps"));
    }
    let auto = allow + block;
    Ok(PhaseMetrics {
        auto_accuracy: (auto > 0).then(|| (auto - false_allow - false_block) as f64 / auto as f64),
        false_allow_rate: (allow > 0).then(|| false_allow as f64 / allow as f64),
        auto_fraction: auto as f64 / n as f64,
        ask_fraction: (n - auto) as f64 / n as f64,
        prob_rmse: rmse(&pairs),
        ece: ece(&pairs, bins)?,
    })
}

/// Agreement between `p̂ > 0.5` and `Φ(f*) > 0.5`.
pub fn boundary_accuracy<'a>(rows: impl IntoIterator<Item = &'a StepRow>) -> Option<f64> {
    let (mut n, mut hit) = (0usize, 0usize);
    for row in rows {
        n += 1;
        hit += usize::from((row.p_hat > 0.5) == (row.true_prob > 0.5));
    }
    (n > 0).then(|| hit as f64 / n as f64)
}

/// Mean, population standard deviation, and count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Stat {
    /// `None` for an empty input.
    pub fn of(values: impl IntoIterator<Item = f64>) -> Option<Self> {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return None;
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Some(Self { mean, std: var.sqrt(), n: v.len() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn row(verdict: Verdict, p_hat: f64, true_prob: f64) -> StepRow {
        StepRow {
            seed: 0,
            arm: Arm::Gateway,
            t: 0,
            phase: Phase::Validation,
            tool: "read_file".into(),
            tier: 0,
            task: 0,
            destructive: false,
            verdict,
            p_hat,
            mu_star: None,
            var_star: None,
            true_prob,
            truth: true_prob > 0.5,
            y: None,
            queried: verdict == Verdict::Ask,
            heldout: false,
        }
    }

    #[test]
    fn ece_cases() {
        let same: Vec<_> = (0..20).map(|i| (i as f64 / 20.0, i as f64 / 20.0)).collect();
        assert_eq!(ece(&same, 10).unwrap(), 0.0);
        assert_relative_eq!(ece(&[(0.9, 0.5); 7], 10).unwrap(), 0.4, epsilon = 1e-15);
        let mixed = [(0.1, 0.2), (0.1, 0.2), (0.1, 0.2), (0.8, 0.6)];
        assert_relative_eq!(ece(&mixed, 10).unwrap(), 0.125, epsilon = 1e-15);
        assert!(ece(&[], 10).is_err());
    }

    #[test]
    fn ece_brute_force() {
        let pairs: Vec<(f64, f64)> = (0..97).map(|i| ((i as f64 * 0.37) % 1.0, (i as f64 * 0.61) % 1.0)).collect();
        let mut total = 0.0;
        for b in 0..10 {
            let lo = b as f64 / 10.0;
            let hi = lo + 0.1;
            let members: Vec<_> =
                pairs.iter().filter(|(p, _)| *p >= lo && (*p < hi || (b == 9 && *p <= 1.0))).collect();
            if members.is_empty() {
                continue;
            }
            let m = members.len() as f64;
            let mp = members.iter().map(|x| x.0).sum::<f64>() / m;
            let mq = members.iter().map(|x| x.1).sum::<f64>() / m;
            total += m / pairs.len() as f64 * (mp - mq).abs();
        }
        assert_relative_eq!(ece(&pairs, 10).unwrap(), total, epsilon = 1e-12);
    }

    #[test]
    fn probability_one_lands_in_last_bin() {
        assert_relative_eq!(ece(&[(1.0, 0.5)], 10).unwrap(), 0.5);
    }

    #[test]
    fn ten_row_log() {
        use Verdict::*;
        let rows = vec![
            row(Allow, 0.95, 0.9),
            row(Allow, 0.92, 0.3),
            row(Allow, 0.97, 0.99),
            row(Block, 0.05, 0.1),
            row(Block, 0.08, 0.7),
            row(Ask, 0.5, 0.4),
            row(Ask, 0.6, 0.8),
            row(Ask, 0.3, 0.2),
            row(Allow, 0.91, 0.6),
            row(Block, 0.02, 0.01),
        ];
        let m = phase_metrics(&rows, 10).unwrap();
        // auto: 7, correct: Allow 0.9, 0.99, 0.6 and Block 0.1, 0.01
        assert_relative_eq!(m.auto_accuracy.unwrap(), 5.0 / 7.0);
        assert_relative_eq!(m.false_allow_rate.unwrap(), 0.25);
        assert_relative_eq!(m.auto_fraction, 0.7);
        assert_relative_eq!(m.ask_fraction, 0.3);
        let sq: f64 = [0.05f64, 0.62, 0.02, 0.05, 0.62, 0.1, 0.2, 0.1, 0.31, 0.01].iter().map(|d| d * d).sum();
        assert_relative_eq!(m.prob_rmse, (sq / 10.0).sqrt(), epsilon = 1e-12);
        // bins 0: {0.05,0.08,0.02} 3: {0.3} 5: {0.5} 6: {0.6} 9: {0.95,0.92,0.97,0.91}
        let e = (0.15f64 - 0.81).abs() / 10.0 + 0.1 / 10.0 + 0.1 / 10.0 + 0.2 / 10.0 + (3.75f64 - 2.79).abs() / 10.0;
        assert_relative_eq!(m.ece, e, epsilon = 1e-12);
    }

    #[test]
    fn all_ask_has_no_accuracy() {
        let rows = vec![row(Verdict::Ask, 0.5, 0.9); 4];
        let m = phase_metrics(&rows, 10).unwrap();
        assert_eq!(m.auto_accuracy, None);
        assert_eq!(m.false_allow_rate, None);
        assert_eq!(m.auto_fraction, 0.0);
        assert_eq!(m.ask_fraction, 1.0);
    }

    #[test]
    fn perfect_arm_never_false_allows() {
        let rows: Vec<_> = (0..50)
            .map(|i| {
                let q = i as f64 / 49.0;
                let v = if q > 0.8 {
                    Verdict::Allow
                } else if q < 0.2 {
                    Verdict::Block
                } else {
                    Verdict::Ask
                };
                row(v, q, q)
            })
            .collect();
        let m = phase_metrics(&rows, 10).unwrap();
        assert_eq!(m.false_allow_rate, Some(0.0));
        assert_eq!(m.auto_accuracy, Some(1.0));
        assert_eq!(m.prob_rmse, 0.0);
    }

    #[test]
    fn boundary_accuracy_counts_agreement() {
        let rows = vec![row(Verdict::Ask, 0.6, 0.7), row(Verdict::Ask, 0.5, 0.7), row(Verdict::Ask, 0.2, 0.1)];
        assert_relative_eq!(boundary_accuracy(&rows).unwrap(), 2.0 / 3.0);
        assert_eq!(boundary_accuracy(&[]), None);
    }

    #[test]
    fn population_std() {
        let s = Stat::of([1.0, 1.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        assert_relative_eq!(s.mean, 2.0 / 3.0);
        assert_relative_eq!(s.std, 0.471_404_520_791_031_7, epsilon = 1e-12);
        assert_eq!(s.n, 6);
        assert_eq!(Stat::of([]), None);
    }
}
