//! Input space: tool actions with decision-time risk attributes, execution
//! contexts, and their numeric encoding.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of tools a registry must hold.
pub const TOOL_COUNT: usize = 18;
/// Number of target-resource sensitivity tiers (`0..=MAX_TIER`).
pub const TIER_COUNT: usize = 8;
pub const MAX_TIER: u8 = (TIER_COUNT - 1) as u8;
/// Number of task contexts.
pub const TASK_COUNT: usize = 7;

const DEFAULT_REGISTRY: &str = include_str!("../registry/tools.v1.toml");

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ToolId(pub u16);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolSpec {
    #[serde(skip)]
    pub id: ToolId,
    pub name: String,
    pub reversibility: f64,
    pub base_sensitivity: f64,
    pub blast_radius: f64,
    pub destructive_capable: bool,
}

#[derive(Debug, Deserialize, Serialize)]
struct RegistryFile {
    version: u32,
    tiers: Vec<String>,
    tasks: Vec<String>,
    #[serde(rename = "tool")]
    tools: Vec<ToolSpec>,
}

/// The fixed, versioned set of tools the gateway knows about.
#[derive(Debug, Clone, PartialEq)]
pub struct ToolRegistry {
    version: u32,
    tools: Vec<ToolSpec>,
    tiers: Vec<String>,
    tasks: Vec<String>,
}

impl ToolRegistry {
    /// The registry shipped with the crate (`registry/tools.v1.toml`).
    pub fn builtin() -> Self {
        Self::from_toml_str(DEFAULT_REGISTRY).expect("builtin registry is valid")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: RegistryFile = toml::from_str(text)?;
        if file.version != 1 {
            return Err(Error::Registry(format!("unsupported version {}", file.version)));
        }
        if file.tools.len() != TOOL_COUNT {
            return Err(Error::Registry(format!("expected {TOOL_COUNT} tools, found {}", file.tools.len())));
        }
        if file.tiers.len() != TIER_COUNT || file.tasks.len() != TASK_COUNT {
            return Err(Error::Registry(format!("expected {TIER_COUNT} tiers and {TASK_COUNT} tasks")));
        }
        let mut tools = file.tools;
        for (i, tool) in tools.iter_mut().enumerate() {
            tool.id = ToolId(i as u16);
            for (label, v) in [
                ("reversibility", tool.reversibility),
                ("base_sensitivity", tool.base_sensitivity),
                ("blast_radius", tool.blast_radius),
            ] {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Registry(format!("{}: {label} = {v} outside [0,1]", tool.name)));
                }
            }
        }
        for (i, a) in tools.iter().enumerate() {
            if tools[..i].iter().any(|b| b.name == a.name) {
                return Err(Error::Registry(format!("duplicate tool name {}", a.name)));
            }
        }
        Ok(Self { version: file.version, tools, tiers: file.tiers, tasks: file.tasks })
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    pub fn tools(&self) -> &[ToolSpec] {
        &self.tools
    }

    pub fn tiers(&self) -> &[String] {
        &self.tiers
    }

    pub fn tasks(&self) -> &[String] {
        &self.tasks
    }

    pub fn get(&self, id: ToolId) -> Result<&ToolSpec> {
        self.tools.get(id.0 as usize).ok_or(Error::UnknownTool(id.0))
    }

    pub fn by_name(&self, name: &str) -> Result<&ToolSpec> {
        self.tools.iter().find(|t| t.name == name).ok_or_else(|| Error::UnknownToolName(name.to_owned()))
    }

    pub fn tier_index(&self, name: &str) -> Option<u8> {
        self.tiers.iter().position(|t| t == name).map(|i| i as u8)
    }

    pub fn task_index(&self, name: &str) -> Option<u8> {
        self.tasks.iter().position(|t| t == name).map(|i| i as u8)
    }

    /// Builds an action for `tool` reading its attributes from the registry.
    /// A destructive argument on a tool that cannot take one is rejected.
    pub fn action(&self, tool: ToolId, destructive_arg: bool, target_tier: u8) -> Result<ActionDescriptor> {
        let spec = self.get(tool)?;
        if destructive_arg && !spec.destructive_capable {
            return Err(Error::InvalidDescriptor(format!("{} does not accept destructive arguments", spec.name)));
        }
        let action = ActionDescriptor {
            tool_id: tool,
            reversibility: spec.reversibility,
            base_sensitivity: spec.base_sensitivity,
            blast_radius: spec.blast_radius,
            destructive_arg,
            target_tier,
        };
        action.validate(self)?;
        Ok(action)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        let file = RegistryFile {
            version: self.version,
            tiers: self.tiers.clone(),
            tasks: self.tasks.clone(),
            tools: self.tools.clone(),
        };
        Ok(toml::to_string(&file)?)
    }
}

/// A proposed tool call.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionDescriptor {
    pub tool_id: ToolId,
    pub reversibility: f64,
    pub base_sensitivity: f64,
    pub blast_radius: f64,
    pub destructive_arg: bool,
    pub target_tier: u8,
}

impl ActionDescriptor {
    pub fn validate(&self, registry: &ToolRegistry) -> Result<()> {
        registry.get(self.tool_id)?;
        for (label, v) in [
            ("reversibility", self.reversibility),
            ("base_sensitivity", self.base_sensitivity),
            ("blast_radius", self.blast_radius),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidDescriptor(format!("{label} = {v} outside [0,1]")));
            }
        }
        if self.target_tier > MAX_TIER {
            return Err(Error::InvalidDescriptor(format!("target_tier {} outside 0..={MAX_TIER}", self.target_tier)));
        }
        Ok(())
    }

    /// Continuous attributes in kernel order:
    /// reversibility, sensitivity, blast radius, destructive flag, tier / 7.
    #[inline]
    pub fn attributes(&self) -> [f64; 5] {
        [
            self.reversibility,
            self.base_sensitivity,
            self.blast_radius,
            if self.destructive_arg { 1.0 } else { 0.0 },
            f64::from(self.target_tier) / f64::from(MAX_TIER),
        ]
    }
}

/// Execution context of a proposed action.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContextDescriptor {
    pub task_id: u8,
    pub repo_id: u32,
    pub session_phase: f64,
}

impl ContextDescriptor {
    pub fn validate(&self) -> Result<()> {
        if usize::from(self.task_id) >= TASK_COUNT {
            return Err(Error::InvalidDescriptor(format!("task_id {} outside 0..{TASK_COUNT}", self.task_id)));
        }
        if !(0.0..=1.0).contains(&self.session_phase) {
            return Err(Error::InvalidDescriptor(format!("session_phase {} outside [0,1]", self.session_phase)));
        }
        Ok(())
    }
}

/// Joint input `(action, context)` at step `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecisionPoint {
    pub action: ActionDescriptor,
    pub context: ContextDescriptor,
    pub t: u64,
}

impl DecisionPoint {
    pub fn validate(&self, registry: &ToolRegistry) -> Result<()> {
        self.action.validate(registry)?;
        self.context.validate()
    }
}

/// Fixed-length numeric embedding of an `(action, context)` pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    /// `[reversibility, base_sensitivity, blast_radius, destructive, tier / 7, session_phase]`
    pub continuous: [f64; 6],
    pub tool_id: ToolId,
    pub task_id: u8,
    pub repo_id: u32,
}

pub fn encode(
    registry: &ToolRegistry,
    action: &ActionDescriptor,
    context: &ContextDescriptor,
) -> Result<FeatureVector> {
    action.validate(registry)?;
    context.validate()?;
    let [rev, sens, blast, destr, tier] = action.attributes();
    Ok(FeatureVector {
        continuous: [rev, sens, blast, destr, tier, context.session_phase],
        tool_id: action.tool_id,
        task_id: context.task_id,
        repo_id: context.repo_id,
    })
}
