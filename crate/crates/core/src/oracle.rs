//! Synthetic supervisor: static acceptability, saturating accumulated trust
//! with an abrupt reset, and a safety veto.
//!
//! The gateway never sees anything defined here except the labels the
//! experiment driver chooses to reveal.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{ContextDescriptor, DecisionPoint, ToolId, ToolRegistry, MAX_TIER, TASK_COUNT, TIER_COUNT};
use crate::inference::Label;
use crate::probit::norm_cdf;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StaticWeights {
    pub reversibility: f64,
    pub sensitivity: f64,
    pub blast_radius: f64,
    pub destructive: f64,
    pub tier: f64,
}

impl Default for StaticWeights {
    fn default() -> Self {
        Self { reversibility: 0.675, sensitivity: 0.9, blast_radius: 0.45, destructive: 0.675, tier: 1.125 }
    }
}

/// All three must hold for the veto to fire.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VetoRule {
    /// Reversibility strictly below this.
    pub rev_max: f64,
    /// Target tier at or above this.
    pub tier_min: u8,
    /// Accumulated trust strictly below this.
    pub trust_min: f64,
}

impl Default for VetoRule {
    fn default() -> Self {
        Self { rev_max: 0.25, tier_min: 4, trust_min: 0.9 }
    }
}

/// Whether familiarity grows with every exposure or only with reviewed
/// (queried) actions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FamiliarityMode {
    #[default]
    Exposure,
    Review,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleParams {
    pub bias: f64,
    pub weights: StaticWeights,
    /// Trust ceiling τ_max.
    pub trust_ceiling: f64,
    /// Familiarity scale κ of the saturating trust term.
    pub trust_rate: f64,
    /// Step at which all familiarity resets.
    pub changepoint: u64,
    /// `false` gives a stationary oracle.
    pub changepoint_enabled: bool,
    pub veto: VetoRule,
    pub veto_value: f64,
    pub familiarity: FamiliarityMode,
}

impl Default for OracleParams {
    fn default() -> Self {
        Self {
            bias: 0.8,
            weights: StaticWeights::default(),
            trust_ceiling: 1.1,
            trust_rate: 3.0,
            changepoint: 750,
            changepoint_enabled: true,
            veto: VetoRule::default(),
            veto_value: -4.0,
            familiarity: FamiliarityMode::Exposure,
        }
    }
}

impl OracleParams {
    pub fn validate(&self, n_steps: u64) -> Result<()> {
        if !(self.trust_rate > 0.0) {
            return Err(Error::Config("oracle trust_rate must be positive".into()));
        }
        if !(self.veto_value <= -3.0) {
            return Err(Error::Config("oracle veto_value must be <= -3".into()));
        }
        if let Some(cp) = self.active_changepoint() {
            if cp >= n_steps {
                return Err(Error::Config(format!("changepoint {cp} outside stream of {n_steps} steps")));
            }
        }
        Ok(())
    }

    pub fn active_changepoint(&self) -> Option<u64> {
        self.changepoint_enabled.then_some(self.changepoint)
    }

    /// Saturating trust after `count` familiar exposures.
    pub fn trust(&self, count: u32) -> f64 {
        self.trust_ceiling * (1.0 - (-f64::from(count) / self.trust_rate).exp())
    }

    pub fn static_term(&self, x: &DecisionPoint) -> f64 {
        let [rev, sens, blast, destr, tier] = x.action.attributes();
        let w = &self.weights;
        w.reversibility * rev - w.sensitivity * sens - w.blast_radius * blast - w.destructive * destr - w.tier * tier
    }

    pub fn vetoed(&self, x: &DecisionPoint, trust: f64) -> bool {
        x.action.reversibility < self.veto.rev_max
            && x.action.target_tier >= self.veto.tier_min
            && trust < self.veto.trust_min
    }
}

/// Per-(tool, task) familiarity counters and the current step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleState {
    counts: Vec<u32>,
    t: u64,
    reset_done: bool,
}

impl Default for OracleState {
    fn default() -> Self {
        Self::new()
    }
}

impl OracleState {
    pub fn new() -> Self {
        Self { counts: vec![0; crate::features::TOOL_COUNT * TASK_COUNT], t: 0, reset_done: false }
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    fn slot(tool: ToolId, task: u8) -> usize {
        usize::from(tool.0) * TASK_COUNT + usize::from(task)
    }

    pub fn familiarity(&self, tool: ToolId, task: u8) -> u32 {
        self.counts[Self::slot(tool, task)]
    }

    pub fn set_familiarity(&mut self, tool: ToolId, task: u8, count: u32) {
        self.counts[Self::slot(tool, task)] = count;
    }

    /// Moves the clock forward, applying the changepoint reset once when it
    /// is crossed.
    pub fn advance_to(&mut self, params: &OracleParams, t: u64) {
        assert!(t >= self.t, "oracle clock cannot run backwards");
        self.t = t;
        if let Some(cp) = params.active_changepoint() {
            if t >= cp && !self.reset_done {
                self.counts.iter_mut().for_each(|c| *c = 0);
                self.reset_done = true;
            }
        }
    }

    /// Counts one exposure; only meaningful in [`FamiliarityMode::Exposure`].
    pub fn record_exposure(&mut self, params: &OracleParams, x: &DecisionPoint) {
        if params.familiarity == FamiliarityMode::Exposure {
            self.counts[Self::slot(x.action.tool_id, x.context.task_id)] += 1;
        }
    }

    /// Counts one reviewed action; only meaningful in
    /// [`FamiliarityMode::Review`].
    pub fn record_review(&mut self, params: &OracleParams, x: &DecisionPoint) {
        if params.familiarity == FamiliarityMode::Review {
            self.counts[Self::slot(x.action.tool_id, x.context.task_id)] += 1;
        }
    }
}

/// Ground-truth latent `f*` at `x`.
pub fn latent(params: &OracleParams, state: &OracleState, x: &DecisionPoint) -> f64 {
    debug_assert_eq!(state.t, x.t, "oracle state must be advanced to the query step");
    let trust = params.trust(state.familiarity(x.action.tool_id, x.context.task_id));
    if params.vetoed(x, trust) {
        return params.veto_value;
    }
    params.bias + params.static_term(x) + trust
}

pub fn true_prob(params: &OracleParams, state: &OracleState, x: &DecisionPoint) -> f64 {
    norm_cdf(latent(params, state, x))
}

/// Draws `y ~ Bernoulli(Φ(f*))`, then counts the exposure.
pub fn sample_label(params: &OracleParams, state: &mut OracleState, x: &DecisionPoint, rng: &mut impl Rng) -> Label {
    let p = true_prob(params, state, x);
    let label = Label::from(rng.random::<f64>() < p);
    state.record_exposure(params, x);
    label
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamParams {
    /// Relative frequency of each target tier.
    pub tier_weights: [f64; TIER_COUNT],
    /// Chance that a destructive-capable tool is called with a destructive
    /// argument.
    pub destructive_rate: f64,
    pub repo_id: u32,
}

impl Default for StreamParams {
    fn default() -> Self {
        Self { tier_weights: [8.0, 7.0, 6.0, 5.0, 4.0, 3.0, 2.0, 1.0], destructive_rate: 0.3, repo_id: 0 }
    }
}

/// Seeded i.i.d. decision points: uniform tool and task, skewed tier,
/// `session_phase = t / n`.
pub fn stream(params: &StreamParams, registry: &ToolRegistry, n: u64, seed: u64) -> Result<Vec<DecisionPoint>> {
    if n == 0 {
        return Err(Error::Config("stream length must be positive".into()));
    }
    if params.tier_weights.iter().any(|w| !(*w >= 0.0)) || params.tier_weights.iter().sum::<f64>() <= 0.0 {
        return Err(Error::Config("tier weights must be non-negative with a positive sum".into()));
    }
    let tiers = rand::distr::weighted::WeightedIndex::new(params.tier_weights)
        .map_err(|e| Error::Config(format!("tier weights: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tool_count = registry.tools().len() as u16;
    (0..n)
        .map(|t| {
            let tool = ToolId(rng.random_range(0..tool_count));
            let task = rng.random_range(0..TASK_COUNT as u8);
            let tier = rng.sample(&tiers) as u8;
            let capable = registry.get(tool)?.destructive_capable;
            let destructive = rng.random::<f64>() < params.destructive_rate && capable;
            debug_assert!(tier <= MAX_TIER);
            Ok(DecisionPoint {
                action: registry.action(tool, destructive, tier)?,
                context: ContextDescriptor {
                    task_id: task,
                    repo_id: params.repo_id,
                    session_phase: t as f64 / n as f64,
                },
                t,
            })
        })
        .collect()
}
