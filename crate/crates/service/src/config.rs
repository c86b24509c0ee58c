use std::path::Path;

use serde::{Deserialize, Serialize};
use trustgate_core::config::ProbeSpec;
use trustgate_core::features::ToolRegistry;
use trustgate_core::gateway::GatewayConfig;

use crate::error::ServiceError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    /// Registry file; the built-in registry when absent.
    pub registry: Option<String>,
    pub gateway: GatewayConfig,
    /// Seconds an escalation stays open before it expires unanswered.
    pub escalation_ttl_secs: u64,
    /// Enables `PUT /v1/thresholds`.
    pub allow_threshold_updates: bool,
    /// Accepts feedback on ALLOW and BLOCK decisions as well as on ASK.
    pub accept_overrides: bool,
    /// Required as `Authorization: Bearer <token>` when set.
    pub bearer_token: Option<String>,
    /// Feedback count between state snapshots.
    pub snapshot_every: u64,
    /// Decisions in the rolling policy mix.
    pub telemetry_window: usize,
    /// Recent events kept for stream replay.
    pub event_buffer: usize,
    /// Fixed point whose `p̂` is traced after every feedback.
    pub probe: Option<ProbeSpec>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            registry: None,
            gateway: GatewayConfig::calibrated(),
            escalation_ttl_secs: 3600,
            allow_threshold_updates: false,
            accept_overrides: true,
            bearer_token: None,
            snapshot_every: 50,
            telemetry_window: 50,
            event_buffer: 1024,
            probe: None,
        }
    }
}

impl ServiceConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ServiceError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut config: Self = toml::from_str(&text).map_err(|e| ServiceError::Config(e.to_string()))?;
        if let (Some(reg), Some(dir)) = (&config.registry, path.parent()) {
            if Path::new(reg).is_relative() {
                config.registry = Some(dir.join(reg).to_string_lossy().into_owned());
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        self.gateway.validate()?;
        if self.escalation_ttl_secs == 0 {
            return Err(ServiceError::Config("escalation_ttl_secs must be positive".into()));
        }
        if self.snapshot_every == 0 || self.telemetry_window == 0 || self.event_buffer == 0 {
            return Err(ServiceError::Config(
                "snapshot_every, telemetry_window and event_buffer must be positive".into(),
            ));
        }
        if let Some(probe) = &self.probe {
            probe.point(&self.registry()?, 0, 0.0)?;
        }
        Ok(())
    }

    pub fn registry(&self) -> Result<ToolRegistry, ServiceError> {
        Ok(match &self.registry {
            Some(path) => ToolRegistry::load(path)?,
            None => ToolRegistry::builtin(),
        })
    }
}
