//! Run configuration for the simulation study.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::{ContextDescriptor, DecisionPoint, ToolRegistry};
use crate::gateway::GatewayConfig;
use crate::oracle::{OracleParams, StreamParams};

/// Step boundaries `[0, learn_end)`, `[learn_end, validation_end)`,
/// `[validation_end, n)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhasePlan {
    pub learn_end: u64,
    pub validation_end: u64,
}

impl Default for PhasePlan {
    fn default() -> Self {
        Self { learn_end: 560, validation_end: 1050 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Learn,
    Validation,
    Test,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::Learn, Phase::Validation, Phase::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Learn => "learn",
            Phase::Validation => "validation",
            Phase::Test => "test",
        }
    }

    pub fn is_scored(self) -> bool {
        self != Phase::Learn
    }
}

impl PhasePlan {
    pub fn validate(&self, n_steps: u64) -> Result<()> {
        if !(0 < self.learn_end && self.learn_end < self.validation_end && self.validation_end < n_steps) {
            return Err(Error::Config(format!(
                "phase plan [0, {}), [{}, {}), [{}, {n_steps}) is not a valid partition",
                self.learn_end, self.learn_end, self.validation_end, self.validation_end
            )));
        }
        Ok(())
    }

    pub fn phase(&self, t: u64) -> Phase {
        if t < self.learn_end {
            Phase::Learn
        } else if t < self.validation_end {
            Phase::Validation
        } else {
            Phase::Test
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuningConfig {
    pub false_allow_cap: f64,
    pub accuracy_floor: f64,
}

impl Default for TuningConfig {
    fn default() -> Self {
        Self { false_allow_cap: 0.03, accuracy_floor: 0.90 }
    }
}

/// What the accuracy and false-allow metrics score against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruthMode {
    /// `Φ(f*) > 0.5`.
    #[default]
    Thresholded,
    /// The sampled label.
    Sampled,
}

/// Granularity of the no-sharing baseline's Beta-Bernoulli cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndependentKey {
    /// One cell per tool.
    Tool,
    /// One cell per (tool, destructive flag, tier, task).
    #[default]
    Combination,
}

/// A fixed action and context named by registry strings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSpec {
    pub tool: String,
    pub tier: String,
    pub task: String,
    #[serde(default)]
    pub destructive: bool,
}

impl ProbeSpec {
    /// Resolves names to ids; `t` and `session_phase` are filled in.
    pub fn point(&self, registry: &ToolRegistry, t: u64, session_phase: f64) -> Result<DecisionPoint> {
        let tool = registry.by_name(&self.tool)?.id;
        let tier =
            registry.tier_index(&self.tier).ok_or_else(|| Error::Config(format!("unknown tier `{}`", self.tier)))?;
        let task =
            registry.task_index(&self.task).ok_or_else(|| Error::Config(format!("unknown task `{}`", self.task)))?;
        Ok(DecisionPoint {
            action: registry.action(tool, self.destructive, tier)?,
            context: ContextDescriptor { task_id: task, repo_id: 0, session_phase },
            t,
        })
    }

    pub fn matches(&self, registry: &ToolRegistry, x: &DecisionPoint) -> Result<bool> {
        let p = self.point(registry, x.t, x.context.session_phase)?;
        Ok(p.action.tool_id == x.action.tool_id
            && p.action.target_tier == x.action.target_tier
            && p.action.destructive_arg == x.action.destructive_arg
            && p.context.task_id == x.context.task_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// Combination whose labels are never revealed to any arm.
    pub heldout: ProbeSpec,
    /// Fixed point whose prediction is traced through the stream.
    pub drift: ProbeSpec,
    pub drift_every: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            heldout: ProbeSpec {
                tool: "write_file".into(),
                tier: "workspace_test".into(),
                task: "test_writing".into(),
                destructive: false,
            },
            drift: ProbeSpec {
                tool: "install_package".into(),
                tier: "workspace_config".into(),
                task: "dependency_update".into(),
                destructive: false,
            },
            drift_every: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { seeds: (0..5).collect() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub n_steps: u64,
    pub seeds: Vec<u64>,
    /// Registry file; the built-in registry when absent.
    pub registry: Option<String>,
    pub phases: PhasePlan,
    pub gateway: GatewayConfig,
    pub tuning: TuningConfig,
    pub truth: TruthMode,
    pub independent: IndependentKey,
    pub ece_bins: usize,
    pub oracle: OracleParams,
    pub stream: StreamParams,
    pub probes: ProbeConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            n_steps: 1500,
            seeds: (0..6).collect(),
            registry: None,
            phases: PhasePlan::default(),
            gateway: GatewayConfig::calibrated(),
            tuning: TuningConfig::default(),
            truth: TruthMode::default(),
            independent: IndependentKey::default(),
            ece_bins: 10,
            oracle: OracleParams::default(),
            stream: StreamParams::default(),
            probes: ProbeConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut config = Self::from_toml_str(&std::fs::read_to_string(path)?)?;
        // relative registry paths resolve against the config file
        if let (Some(reg), Some(dir)) = (&config.registry, path.parent()) {
            if Path::new(reg).is_relative() {
                config.registry = Some(dir.join(reg).to_string_lossy().into_owned());
            }
        }
        Ok(config)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::Config("n_steps must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        if self.ece_bins == 0 {
            return Err(Error::Config("ece_bins must be positive".into()));
        }
        if self.probes.drift_every == 0 {
            return Err(Error::Config("probes.drift_every must be positive".into()));
        }
        let cap = self.tuning.false_allow_cap;
        if !(cap > 0.0 && cap <= 1.0) {
            return Err(Error::Config(format!("false_allow_cap {cap} outside (0, 1]")));
        }
        if !(0.0..=1.0).contains(&self.tuning.accuracy_floor) {
            return Err(Error::Config("accuracy_floor outside [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.stream.destructive_rate) {
            return Err(Error::Config("destructive_rate outside [0, 1]".into()));
        }
        self.phases.validate(self.n_steps)?;
        self.gateway.validate()?;
        self.oracle.validate(self.n_steps)?;
        let registry = self.registry()?;
        self.probes.heldout.point(&registry, 0, 0.0)?;
        self.probes.drift.point(&registry, 0, 0.0)?;
        Ok(())
    }

    pub fn registry(&self) -> Result<ToolRegistry> {
        match &self.registry {
            Some(path) => ToolRegistry::load(path),
            None => Ok(ToolRegistry::builtin()),
        }
    }

    /// SHA-256 of the canonical serialisation, hex encoded.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml_string()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_round_trips() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let text = c.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), c);
        assert_eq!(c.hash().unwrap().len(), 64);
    }

    #[test]
    fn partial_file_takes_defaults() {
        let c = RunConfig::from_toml_str("seeds = [3, 4]\n[gateway]\nwindow = 50\n").unwrap();
        assert_eq!(c.seeds, vec![3, 4]);
        assert_eq!(c.gateway.window, 50);
        assert_eq!(c.n_steps, 1500);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(RunConfig::from_toml_str("n_steps = 900").is_err());
        assert!(RunConfig::from_toml_str("seeds = [1, 1]").is_err());
        assert!(RunConfig::from_toml_str("unknown = 1").is_err());
        assert!(RunConfig::from_toml_str("[phases]\nlearn_end = 600\nvalidation_end = 500").is_err());
        assert!(
            RunConfig::from_toml_str("[probes.heldout]\ntool = \"nope\"\ntier = \"scratch\"\ntask = \"docs\"").is_err()
        );
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let b = RunConfig { seeds: vec![9], ..RunConfig::default() };
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        assert_eq!(a.hash().unwrap(), RunConfig::default().hash().unwrap());
    }

    #[test]
    fn phase_lookup() {
        let plan = PhasePlan::default();
        assert_eq!(plan.phase(0), Phase::Learn);
        assert_eq!(plan.phase(559), Phase::Learn);
        assert_eq!(plan.phase(560), Phase::Validation);
        assert_eq!(plan.phase(1049), Phase::Validation);
        assert_eq!(plan.phase(1050), Phase::Test);
    }
}
