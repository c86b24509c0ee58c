//! Wire types for the `/v1` API.

use serde::{Deserialize, Serialize};
use trustgate_core::features::{ContextDescriptor, DecisionPoint, ToolRegistry};
use trustgate_core::gateway::{Thresholds, Verdict};
use trustgate_core::inference::Label;

use crate::error::ApiError;
use axum::http::StatusCode;

pub const SCHEMA_VERSION: &str = "v1";

/// A tool named either by registry name or by numeric id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ToolRef {
    Id(u16),
    Name(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionRequest {
    pub tool_id: ToolRef,
    #[serde(default)]
    pub destructive_arg: bool,
    pub target_tier: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextRequest {
    pub task_id: u8,
    #[serde(default)]
    pub repo_id: u32,
    #[serde(default)]
    pub session_phase: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecideRequest {
    pub action: ActionRequest,
    pub context: ContextRequest,
}

impl DecideRequest {
    /// Resolves the request against the registry at step `t`. Unknown tools
    /// are 422, any other violation is 400.
    pub fn resolve(&self, registry: &ToolRegistry, t: u64) -> Result<DecisionPoint, ApiError> {
        let spec = match &self.action.tool_id {
            ToolRef::Id(id) => registry.tools().iter().find(|s| s.id.0 == *id),
            ToolRef::Name(name) => registry.tools().iter().find(|s| &s.name == name),
        }
        .ok_or_else(|| {
            ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "unknown_tool",
                format!("unknown tool_id {:?}", self.action.tool_id),
            )
        })?;
        let action = registry
            .action(spec.id, self.action.destructive_arg, self.action.target_tier)
            .map_err(|e| ApiError::bad_request(e.to_string()))?;
        let context = ContextDescriptor {
            task_id: self.context.task_id,
            repo_id: self.context.repo_id,
            session_phase: self.context.session_phase,
        };
        context.validate().map_err(|e| ApiError::bad_request(e.to_string()))?;
        Ok(DecisionPoint { action, context, t })
    }
}

/// Human-readable summary of a decision point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointSummary {
    pub tool: String,
    pub tool_id: u16,
    pub destructive_arg: bool,
    pub target_tier: u8,
    pub tier: String,
    pub task_id: u8,
    pub task: String,
    pub repo_id: u32,
    pub session_phase: f64,
    pub t: u64,
}

impl PointSummary {
    pub fn of(registry: &ToolRegistry, x: &DecisionPoint) -> Self {
        let name = |v: &[String], i: u8| v.get(usize::from(i)).cloned().unwrap_or_default();
        Self {
            tool: registry.get(x.action.tool_id).map(|s| s.name.clone()).unwrap_or_default(),
            tool_id: x.action.tool_id.0,
            destructive_arg: x.action.destructive_arg,
            target_tier: x.action.target_tier,
            tier: name(registry.tiers(), x.action.target_tier),
            task_id: x.context.task_id,
            task: name(registry.tasks(), x.context.task_id),
            repo_id: x.context.repo_id,
            session_phase: x.context.session_phase,
            t: x.t,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EscalationStatus {
    Open,
    Answered,
    Expired,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingEscalation {
    pub decision_id: u64,
    pub point: PointSummary,
    pub p_hat: f64,
    pub mu_star: f64,
    pub var_star: f64,
    pub created_at_ms: u64,
    pub expires_at_ms: u64,
    pub status: EscalationStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecideResponse {
    pub decision_id: u64,
    pub verdict: Verdict,
    pub p_hat: f64,
    pub mu_star: f64,
    pub var_star: f64,
    pub t: u64,
    /// Present for ASK.
    pub escalation: Option<PendingEscalation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackRequest {
    pub decision_id: u64,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackResponse {
    pub decision_id: u64,
    pub verdict: Verdict,
    pub label: Label,
    /// The label contradicts an ALLOW or BLOCK verdict.
    pub is_override: bool,
    pub training_size: usize,
    /// Step stamped on the ingested record.
    pub t: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSample {
    pub t: u64,
    pub p_hat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Telemetry {
    pub decision_count: u64,
    /// Shares over the last `window` decisions; all zero before any decision.
    pub allow_share: f64,
    pub block_share: f64,
    pub ask_share: f64,
    pub window: usize,
    /// Escalations raised so far.
    pub queries: u64,
    pub feedback_count: u64,
    pub overrides: u64,
    pub expired: u64,
    pub tau_low: f64,
    pub tau_high: f64,
    pub probe: Vec<ProbeSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub records: usize,
    pub window: usize,
    pub converged: bool,
    pub iterations: usize,
    pub log_objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateView {
    pub schema_version: String,
    pub thresholds: Thresholds,
    pub threshold_updates_enabled: bool,
    pub posterior: PosteriorSummary,
    pub open_escalations: usize,
    pub last_seq: u64,
    pub telemetry: Telemetry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdsRequest {
    pub tau_low: f64,
    pub tau_high: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Decision,
    Feedback,
    Expired,
    Thresholds,
    Telemetry,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Decision => "decision",
            EventKind::Feedback => "feedback",
            EventKind::Expired => "expired",
            EventKind::Thresholds => "thresholds",
            EventKind::Telemetry => "telemetry",
        }
    }
}

/// One item of the server-sent event stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    pub kind: EventKind,
    pub data: serde_json::Value,
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn req(tool: serde_json::Value) -> DecideRequest {
        serde_json::from_value(json!({
            "action": { "tool_id": tool, "target_tier": 2 },
            "context": { "task_id": 1 }
        }))
        .unwrap()
    }

    #[test]
    fn tool_by_name_or_id() {
        let reg = ToolRegistry::builtin();
        let by_name = req(json!("write_file")).resolve(&reg, 7).unwrap();
        let by_id = req(json!(3)).resolve(&reg, 7).unwrap();
        assert_eq!(by_name, by_id);
        assert_eq!(by_name.t, 7);
        assert!(!by_name.action.destructive_arg);
        assert_eq!(by_name.context.repo_id, 0);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let bad = json!({ "action": { "tool_id": 0, "target_tier": 0, "force": true }, "context": { "task_id": 0 } });
        assert!(serde_json::from_value::<DecideRequest>(bad).is_err());
    }

    #[test]
    fn resolve_error_codes() {
        let reg = ToolRegistry::builtin();
        assert_eq!(req(json!("nope")).resolve(&reg, 0).unwrap_err().status, StatusCode::UNPROCESSABLE_ENTITY);
        let mut r = req(json!(3));
        r.context.task_id = 40;
        assert_eq!(r.resolve(&reg, 0).unwrap_err().status, StatusCode::BAD_REQUEST);
        let mut r = req(json!(3));
        r.context.session_phase = 1.5;
        assert_eq!(r.resolve(&reg, 0).unwrap_err().status, StatusCode::BAD_REQUEST);
    }

    #[test]
    fn wire_casing() {
        let v = serde_json::to_value(FeedbackResponse {
            decision_id: 1,
            verdict: Verdict::Allow,
            label: Label::Deny,
            is_override: true,
            training_size: 3,
            t: 4,
        })
        .unwrap();
        assert_eq!(v["verdict"], "ALLOW");
        assert_eq!(v["label"], "deny");
        assert_eq!(serde_json::to_value(EscalationStatus::Open).unwrap(), "open");
        assert_eq!(serde_json::to_value(EventKind::Telemetry).unwrap(), EventKind::Telemetry.as_str());
    }
}
