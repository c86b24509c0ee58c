//! Three-tier decision rule, online feedback ingestion, and threshold tuning.

use std::collections::VecDeque;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::DecisionPoint;
use crate::inference::{self, FeedbackRecord, Label, NewtonSettings, Posterior, Prediction, TrainingSet};
use crate::kernel::KernelParams;

/// Lower and upper edges of the ASK band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub tau_low: f64,
    pub tau_high: f64,
}

impl Thresholds {
    pub fn new(tau_low: f64, tau_high: f64) -> Result<Self> {
        let t = Self { tau_low, tau_high };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if 0.0 < self.tau_low && self.tau_low < self.tau_high && self.tau_high < 1.0 {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "thresholds need 0 < tau_low < tau_high < 1, got ({}, {})",
                self.tau_low, self.tau_high
            )))
        }
    }

    /// ALLOW above `tau_high`, BLOCK below `tau_low`, ASK otherwise
    /// (both edges belong to ASK).
    pub fn classify(&self, p_hat: f64) -> Verdict {
        if p_hat > self.tau_high {
            Verdict::Allow
        } else if p_hat < self.tau_low {
            Verdict::Block
        } else {
            Verdict::Ask
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Verdict {
    Allow,
    Block,
    Ask,
}

impl Verdict {
    pub fn is_auto(self) -> bool {
        !matches!(self, Verdict::Ask)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Allow => "ALLOW",
            Verdict::Block => "BLOCK",
            Verdict::Ask => "ASK",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub verdict: Verdict,
    pub p_hat: f64,
    pub mu_star: f64,
    pub var_star: f64,
    pub decision_id: u64,
    pub t: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    /// Sliding-window size W.
    pub window: usize,
    pub prior_mean: f64,
    pub thresholds: Thresholds,
    pub kernel: KernelParams,
    pub newton: NewtonSettings,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            window: 400,
            prior_mean: 0.0,
            thresholds: Thresholds { tau_low: 0.1, tau_high: 0.9 },
            kernel: KernelParams::default(),
            newton: NewtonSettings::default(),
        }
    }
}

impl GatewayConfig {
    /// Kernel and starting band calibrated against the default oracle.
    pub fn calibrated() -> Self {
        Self {
            thresholds: Thresholds { tau_low: 0.35, tau_high: 0.70 },
            kernel: KernelParams { signal_variance: 4.0, w_ctx: [0.3, 0.5, 0.25], ..KernelParams::default() },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Config("window must be positive".into()));
        }
        if !self.prior_mean.is_finite() {
            return Err(Error::Config("prior_mean must be finite".into()));
        }
        self.thresholds.validate()?;
        self.kernel.validate()
    }
}

/// Bound on the verdict history kept for rolling rates.
const HISTORY_LIMIT: usize = 10_000;

/// Online gateway: a feedback window, the posterior fitted to it, and the
/// active thresholds.
#[derive(Debug, Clone)]
pub struct GatewayState {
    config: GatewayConfig,
    training: TrainingSet,
    thresholds: Thresholds,
    frozen: bool,
    posterior: Arc<Posterior>,
    history: VecDeque<Verdict>,
    next_decision_id: u64,
}

impl GatewayState {
    pub fn new(config: GatewayConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            training: TrainingSet::new(config.window),
            thresholds: config.thresholds,
            frozen: false,
            posterior: Arc::new(Posterior::prior(config.kernel, config.prior_mean)),
            history: VecDeque::new(),
            next_decision_id: 0,
            config,
        })
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    pub fn training(&self) -> &TrainingSet {
        &self.training
    }

    pub fn thresholds(&self) -> Thresholds {
        self.thresholds
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn posterior(&self) -> Arc<Posterior> {
        Arc::clone(&self.posterior)
    }

    pub fn set_thresholds(&mut self, thresholds: Thresholds) -> Result<()> {
        if self.frozen {
            return Err(Error::Config("thresholds are frozen".into()));
        }
        thresholds.validate()?;
        self.thresholds = thresholds;
        Ok(())
    }

    /// Stops further threshold changes; learning continues.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn predict(&self, x: &DecisionPoint) -> Prediction {
        inference::predict(&self.posterior, x, x.t)
    }

    /// Verdict for `x` at its own step. Does not touch the state.
    pub fn decide(&self, x: &DecisionPoint) -> GateDecision {
        let pred = self.predict(x);
        GateDecision {
            verdict: self.thresholds.classify(pred.p_hat),
            p_hat: pred.p_hat,
            mu_star: pred.mu_star,
            var_star: pred.var_star,
            decision_id: self.next_decision_id,
            t: x.t,
        }
    }

    /// [`decide`](Self::decide) plus bookkeeping: assigns a fresh id and
    /// appends the verdict to the rolling history.
    pub fn decide_and_record(&mut self, x: &DecisionPoint) -> GateDecision {
        let decision = self.decide(x);
        self.next_decision_id += 1;
        if self.history.len() == HISTORY_LIMIT {
            self.history.pop_front();
        }
        self.history.push_back(decision.verdict);
        decision
    }

    /// Appends one feedback record and refits. On failure the previous
    /// window and posterior are kept.
    pub fn ingest(&mut self, x: DecisionPoint, y: Label) -> Result<()> {
        let staged = self.stage(x, y)?;
        self.commit(staged);
        Ok(())
    }

    /// The window and posterior [`ingest`](Self::ingest) would produce,
    /// computed without touching `self`.
    pub fn stage(&self, x: DecisionPoint, y: Label) -> Result<Staged> {
        let mut training = self.training.clone();
        training.push(FeedbackRecord { x, y })?;
        let posterior = inference::refit(
            &self.posterior,
            &training,
            &self.config.kernel,
            self.config.prior_mean,
            &self.config.newton,
        )?;
        Ok(Staged { training, posterior: Arc::new(posterior) })
    }

    /// Installs a staged refit. The window must not have changed since
    /// [`stage`](Self::stage).
    pub fn commit(&mut self, staged: Staged) {
        self.training = staged.training;
        self.posterior = staged.posterior;
    }

    /// [`ingest`](Self::ingest) for a raw 0/1 label.
    pub fn ingest_raw(&mut self, x: DecisionPoint, y: i64) -> Result<()> {
        self.ingest(x, Label::try_from(y)?)
    }

    /// Fraction of ASK verdicts among the last `recent_window` recorded
    /// decisions; `None` before any decision.
    pub fn ask_rate(&self, recent_window: usize) -> Option<f64> {
        let take = recent_window.min(self.history.len());
        if take == 0 {
            return None;
        }
        let asks = self.history.iter().rev().take(take).filter(|v| **v == Verdict::Ask).count();
        Some(asks as f64 / take as f64)
    }

    pub fn decisions_made(&self) -> u64 {
        self.next_decision_id
    }

    pub fn snapshot(&self) -> GatewaySnapshot {
        GatewaySnapshot {
            config: self.config,
            records: self.training.records().copied().collect(),
            thresholds: self.thresholds,
            frozen: self.frozen,
            next_decision_id: self.next_decision_id,
            history: self.history.iter().copied().collect(),
        }
    }

    /// Rebuilds a gateway from a snapshot by refitting its window.
    pub fn restore(snapshot: &GatewaySnapshot) -> Result<Self> {
        let mut state = Self::new(snapshot.config)?;
        for record in &snapshot.records {
            state.training.push(*record)?;
        }
        if !state.training.is_empty() {
            state.posterior = Arc::new(inference::fit_laplace(
                &state.training,
                &state.config.kernel,
                state.config.prior_mean,
                &state.config.newton,
            )?);
        }
        snapshot.thresholds.validate()?;
        state.thresholds = snapshot.thresholds;
        state.frozen = snapshot.frozen;
        state.next_decision_id = snapshot.next_decision_id;
        state.history = snapshot.history.iter().copied().collect();
        Ok(state)
    }
}

/// A refit computed off the decision path, see [`GatewayState::stage`].
#[derive(Debug, Clone)]
pub struct Staged {
    training: TrainingSet,
    posterior: Arc<Posterior>,
}

/// Serializable gateway state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatewaySnapshot {
    pub config: GatewayConfig,
    pub records: Vec<FeedbackRecord>,
    pub thresholds: Thresholds,
    pub frozen: bool,
    pub next_decision_id: u64,
    #[serde(default)]
    pub history: Vec<Verdict>,
}

/// Summary of applying one threshold pair to a labelled log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandScore {
    pub auto_fraction: f64,
    /// Wrong ALLOWs over all ALLOWs; 0 when nothing is allowed.
    pub false_allow_rate: f64,
    /// Correct auto-decisions over all auto-decisions; `None` when nothing
    /// is auto-decided.
    pub accuracy: Option<f64>,
}

pub fn score_band(log: &[(f64, bool)], thresholds: &Thresholds) -> BandScore {
    let (mut allow, mut false_allow, mut block, mut false_block) = (0usize, 0usize, 0usize, 0usize);
    for &(p, truth) in log {
        match thresholds.classify(p) {
            Verdict::Allow => {
                allow += 1;
                false_allow += usize::from(!truth);
            }
            Verdict::Block => {
                block += 1;
                false_block += usize::from(truth);
            }
            Verdict::Ask => {}
        }
    }
    let auto = allow + block;
    BandScore {
        auto_fraction: auto as f64 / log.len().max(1) as f64,
        false_allow_rate: if allow == 0 { 0.0 } else { false_allow as f64 / allow as f64 },
        accuracy: (auto > 0).then(|| (auto - false_allow - false_block) as f64 / auto as f64),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuneOutcome {
    pub thresholds: Thresholds,
    pub feasible: bool,
    pub score: BandScore,
}

/// Grid search for the band that automates the most while keeping the
/// false-allow rate at or below `cap` and auto-decision accuracy at or above
/// `accuracy_floor`. Ties go to the wider band. With no feasible pair the
/// most conservative corner (0.01, 0.99) is returned, flagged infeasible.
pub fn tune_thresholds(log: &[(f64, bool)], cap: f64, accuracy_floor: f64) -> Result<TuneOutcome> {
    if log.is_empty() {
        return Err(Error::Empty("threshold tuning needs a non-empty log"));
    }
    if !(cap > 0.0 && cap <= 1.0) {
        return Err(Error::Config(format!("false-allow cap {cap} outside (0, 1]")));
    }
    let mut best: Option<(usize, i32, i32, BandScore)> = None;
    for low in 1..=30 {
        for high in 70..=99 {
            let thresholds = grid_pair(low, high);
            let score = score_band(log, &thresholds);
            let feasible = score.false_allow_rate <= cap && score.accuracy.is_none_or(|a| a >= accuracy_floor);
            if !feasible {
                continue;
            }
            // compare auto counts exactly rather than as floats
            let auto = (score.auto_fraction * log.len() as f64).round() as usize;
            let width = high - low;
            let better = match &best {
                None => true,
                Some((b_auto, b_low, b_high, _)) => auto > *b_auto || (auto == *b_auto && width > b_high - b_low),
            };
            if better {
                best = Some((auto, low, high, score));
            }
        }
    }
    Ok(match best {
        Some((_, low, high, score)) => TuneOutcome { thresholds: grid_pair(low, high), feasible: true, score },
        None => {
            let thresholds = grid_pair(1, 99);
            TuneOutcome { thresholds, feasible: false, score: score_band(log, &thresholds) }
        }
    })
}

fn grid_pair(low: i32, high: i32) -> Thresholds {
    Thresholds { tau_low: f64::from(low) / 100.0, tau_high: f64::from(high) / 100.0 }
}
