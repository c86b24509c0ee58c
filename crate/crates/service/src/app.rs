//! Service state: the gateway, open escalations, telemetry and the event
//! fan-out. Decisions take a short write lock; feedback refits off the lock
//! and is serialized through a single writer.

use std::collections::{BTreeMap, VecDeque};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock, RwLockReadGuard, RwLockWriteGuard};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::http::StatusCode;
use tokio::sync::{broadcast, Mutex};
use trustgate_core::features::{DecisionPoint, ToolRegistry};
use trustgate_core::gateway::{GatewayState, Thresholds, Verdict};
use trustgate_core::inference::Label;

use crate::config::ServiceConfig;
use crate::error::{ApiError, ServiceError};
use crate::schema::*;
use crate::store::{Counters, DecisionEntry, LogEntry, Snapshot, Store};

/// Probe samples kept in memory.
const PROBE_LIMIT: usize = 500;

pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

#[derive(Debug, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
    }
}

/// Hand-driven clock for tests.
#[derive(Debug, Default)]
pub struct ManualClock(AtomicU64);

impl ManualClock {
    pub fn new(ms: u64) -> Self {
        Self(AtomicU64::new(ms))
    }

    pub fn advance(&self, ms: u64) {
        self.0.fetch_add(ms, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

struct Inner {
    gateway: GatewayState,
    decisions: BTreeMap<u64, DecisionEntry>,
    counters: Counters,
    recent: VecDeque<Verdict>,
    probe: Vec<ProbeSample>,
    seq: u64,
    backlog: VecDeque<Event>,
    store: Option<Store>,
}

pub struct App {
    config: ServiceConfig,
    registry: ToolRegistry,
    inner: RwLock<Inner>,
    writer: Mutex<()>,
    events: broadcast::Sender<Event>,
    clock: Arc<dyn Clock>,
}

impl App {
    /// Opens the service, recovering from `state_dir` when it holds a log.
    pub fn open(
        config: ServiceConfig,
        state_dir: Option<PathBuf>,
        clock: Arc<dyn Clock>,
    ) -> Result<Arc<Self>, ServiceError> {
        config.validate()?;
        let registry = config.registry()?;
        let mut inner = Inner {
            gateway: GatewayState::new(config.gateway)?,
            decisions: BTreeMap::new(),
            counters: Counters::default(),
            recent: VecDeque::new(),
            probe: Vec::new(),
            seq: 0,
            backlog: VecDeque::new(),
            store: None,
        };
        if let Some(dir) = state_dir {
            let store = Store::open(dir)?;
            if let Some(snap) = store.read_snapshot()? {
                inner.gateway = GatewayState::restore(&snap.gateway)?;
                inner.decisions = snap.decisions.into_iter().map(|d| (d.decision_id, d)).collect();
                inner.counters = snap.counters;
                inner.recent = snap.recent.into();
                inner.probe = snap.probe;
                inner.seq = snap.seq;
            }
            let mut replayed = 0usize;
            for entry in store.read_log()? {
                if entry.seq() > inner.seq {
                    inner.replay(&config, &registry, entry)?;
                    replayed += 1;
                }
            }
            tracing::info!(replayed, seq = inner.seq, records = inner.gateway.training().len(), "state recovered");
            inner.store = Some(store);
        }
        let (events, _) = broadcast::channel(config.event_buffer);
        Ok(Arc::new(Self { config, registry, inner: RwLock::new(inner), writer: Mutex::new(()), events, clock }))
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    fn read(&self) -> RwLockReadGuard<'_, Inner> {
        self.inner.read().unwrap_or_else(|e| e.into_inner())
    }

    fn write(&self) -> RwLockWriteGuard<'_, Inner> {
        self.inner.write().unwrap_or_else(|e| e.into_inner())
    }

    pub fn decide(&self, request: &DecideRequest) -> Result<DecideResponse, ApiError> {
        let now = self.clock.now_ms();
        let mut inner = self.write();
        inner.expire_due(self, now)?;
        let x = request.resolve(&self.registry, inner.gateway.decisions_made())?;
        let d = inner.gateway.decide_and_record(&x);
        let entry = DecisionEntry {
            decision_id: d.decision_id,
            x,
            verdict: d.verdict,
            p_hat: d.p_hat,
            mu_star: d.mu_star,
            var_star: d.var_star,
            created_at_ms: now,
            expires_at_ms: now + 1000 * self.config.escalation_ttl_secs,
            answered: false,
            expired: false,
        };
        inner.push_recent(d.verdict, self.config.telemetry_window);
        if d.verdict == Verdict::Ask {
            inner.counters.queries += 1;
        }
        let seq = inner.seq + 1;
        inner.log(&LogEntry::Decision {
            seq,
            decision_id: d.decision_id,
            x,
            verdict: d.verdict,
            p_hat: d.p_hat,
            created_at_ms: entry.created_at_ms,
            expires_at_ms: entry.expires_at_ms,
        })?;
        let escalation = (d.verdict == Verdict::Ask).then(|| self.pending_view(&entry));
        inner.decisions.insert(d.decision_id, entry);
        let response = DecideResponse {
            decision_id: d.decision_id,
            verdict: d.verdict,
            p_hat: d.p_hat,
            mu_star: d.mu_star,
            var_star: d.var_star,
            t: d.t,
            escalation,
        };
        inner.emit(self, EventKind::Decision, serde_json::to_value(&response).map_err(ApiError::internal)?);
        let telemetry = inner.telemetry(&self.config);
        inner.emit(self, EventKind::Telemetry, serde_json::to_value(telemetry).map_err(ApiError::internal)?);
        Ok(response)
    }

    pub async fn feedback(&self, request: &FeedbackRequest) -> Result<FeedbackResponse, ApiError> {
        let _writer = self.writer.lock().await;
        let (gate, x, verdict) = {
            let now = self.clock.now_ms();
            let mut inner = self.write();
            inner.expire_due(self, now)?;
            let entry = inner.answerable(&self.config, request.decision_id)?;
            let x = DecisionPoint { t: inner.gateway.decisions_made(), ..entry.x };
            (inner.gateway.clone(), x, entry.verdict)
        };
        let label = request.label;
        let staged = tokio::task::spawn_blocking(move || gate.stage(x, label))
            .await
            .map_err(ApiError::internal)?
            .map_err(|e| {
                tracing::warn!(decision_id = request.decision_id, "refit failed: {e}");
                ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "refit_failed", e.to_string())
            })?;

        let now = self.clock.now_ms();
        let mut inner = self.write();
        inner.expire_due(self, now)?;
        // the escalation may have expired while the refit ran
        inner.answerable(&self.config, request.decision_id)?;
        let seq = inner.seq + 1;
        inner.log(&LogEntry::Feedback { seq, decision_id: request.decision_id, label, x })?;
        inner.gateway.commit(staged);
        let is_override = inner.mark_answered(request.decision_id, label);
        inner.sample_probe(&self.config, &self.registry)?;
        let response = FeedbackResponse {
            decision_id: request.decision_id,
            verdict,
            label,
            is_override,
            training_size: inner.gateway.training().len(),
            t: x.t,
        };
        inner.emit(self, EventKind::Feedback, serde_json::to_value(&response).map_err(ApiError::internal)?);
        let telemetry = inner.telemetry(&self.config);
        inner.emit(self, EventKind::Telemetry, serde_json::to_value(telemetry).map_err(ApiError::internal)?);
        if inner.counters.feedback.is_multiple_of(self.config.snapshot_every) {
            inner.snapshot()?;
        }
        Ok(response)
    }

    pub fn pending(&self) -> Result<Vec<PendingEscalation>, ApiError> {
        let now = self.clock.now_ms();
        let mut inner = self.write();
        inner.expire_due(self, now)?;
        Ok(inner
            .decisions
            .values()
            .filter(|d| d.verdict == Verdict::Ask && !d.answered && !d.expired)
            .map(|d| self.pending_view(d))
            .collect())
    }

    pub fn state(&self) -> StateView {
        let inner = self.read();
        let post = inner.gateway.posterior();
        StateView {
            schema_version: SCHEMA_VERSION.into(),
            thresholds: inner.gateway.thresholds(),
            threshold_updates_enabled: self.config.allow_threshold_updates,
            posterior: PosteriorSummary {
                records: post.len(),
                window: inner.gateway.config().window,
                converged: post.converged(),
                iterations: post.iterations(),
                log_objective: post.log_objective(),
            },
            open_escalations: inner
                .decisions
                .values()
                .filter(|d| d.verdict == Verdict::Ask && !d.answered && !d.expired)
                .count(),
            last_seq: inner.seq,
            telemetry: inner.telemetry(&self.config),
        }
    }

    pub async fn set_thresholds(&self, request: &ThresholdsRequest) -> Result<StateView, ApiError> {
        if !self.config.allow_threshold_updates {
            return Err(ApiError::new(
                StatusCode::FORBIDDEN,
                "threshold_updates_disabled",
                "threshold updates are disabled",
            ));
        }
        let thresholds =
            Thresholds::new(request.tau_low, request.tau_high).map_err(|e| ApiError::bad_request(e.to_string()))?;
        let _writer = self.writer.lock().await;
        {
            let mut inner = self.write();
            inner.gateway.set_thresholds(thresholds).map_err(|e| ApiError::bad_request(e.to_string()))?;
            let seq = inner.seq + 1;
            inner.log(&LogEntry::Thresholds { seq, thresholds })?;
            inner.emit(self, EventKind::Thresholds, serde_json::to_value(thresholds).map_err(ApiError::internal)?);
        }
        Ok(self.state())
    }

    /// Expires overdue escalations; returns how many.
    pub fn expire_due(&self) -> Result<usize, ServiceError> {
        let now = self.clock.now_ms();
        self.write().expire_due(self, now)
    }

    /// Buffered events after `since` and a receiver for everything later.
    pub fn subscribe(&self, since: u64) -> (Vec<Event>, broadcast::Receiver<Event>) {
        let inner = self.read();
        let rx = self.events.subscribe();
        (inner.backlog.iter().filter(|e| e.seq > since).cloned().collect(), rx)
    }

    pub fn snapshot_now(&self) -> Result<(), ServiceError> {
        self.write().snapshot()
    }

    /// `p̂` for a request at the next step, without recording a decision.
    pub fn peek(&self, request: &DecideRequest) -> Result<f64, ApiError> {
        let inner = self.read();
        let x = request.resolve(&self.registry, inner.gateway.decisions_made())?;
        Ok(inner.gateway.predict(&x).p_hat)
    }

    fn pending_view(&self, d: &DecisionEntry) -> PendingEscalation {
        PendingEscalation {
            decision_id: d.decision_id,
            point: PointSummary::of(&self.registry, &d.x),
            p_hat: d.p_hat,
            mu_star: d.mu_star,
            var_star: d.var_star,
            created_at_ms: d.created_at_ms,
            expires_at_ms: d.expires_at_ms,
            status: if d.answered {
                EscalationStatus::Answered
            } else if d.expired {
                EscalationStatus::Expired
            } else {
                EscalationStatus::Open
            },
        }
    }
}

impl Inner {
    fn log(&mut self, entry: &LogEntry) -> Result<(), ServiceError> {
        debug_assert_eq!(entry.seq(), self.seq + 1);
        if let Some(store) = &mut self.store {
            store.append(entry)?;
        }
        Ok(())
    }

    fn emit(&mut self, app: &App, kind: EventKind, data: serde_json::Value) {
        self.seq += 1;
        let event = Event { seq: self.seq, kind, data };
        if self.backlog.len() == app.config.event_buffer {
            self.backlog.pop_front();
        }
        self.backlog.push_back(event.clone());
        // no subscribers is fine
        let _ = app.events.send(event);
    }

    fn push_recent(&mut self, verdict: Verdict, window: usize) {
        if self.recent.len() == window {
            self.recent.pop_front();
        }
        self.recent.push_back(verdict);
    }

    fn answerable(&self, config: &ServiceConfig, decision_id: u64) -> Result<DecisionEntry, ApiError> {
        let entry = self.decisions.get(&decision_id).ok_or_else(|| {
            ApiError::new(StatusCode::NOT_FOUND, "unknown_decision", format!("no decision {decision_id}"))
        })?;
        if entry.answered {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                "already_answered",
                format!("decision {decision_id} already answered"),
            ));
        }
        if entry.expired {
            return Err(ApiError::new(StatusCode::CONFLICT, "expired", format!("escalation {decision_id} expired")));
        }
        if entry.verdict != Verdict::Ask && !config.accept_overrides {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                "overrides_disabled",
                "feedback on auto decisions is disabled",
            ));
        }
        Ok(entry.clone())
    }

    /// Returns whether the label contradicts an auto verdict.
    fn mark_answered(&mut self, decision_id: u64, label: Label) -> bool {
        let entry = self.decisions.get_mut(&decision_id).expect("checked by answerable");
        entry.answered = true;
        let is_override = match entry.verdict {
            Verdict::Allow => !label.is_approve(),
            Verdict::Block => label.is_approve(),
            Verdict::Ask => false,
        };
        self.counters.feedback += 1;
        self.counters.overrides += u64::from(is_override);
        is_override
    }

    fn sample_probe(&mut self, config: &ServiceConfig, registry: &ToolRegistry) -> Result<(), ServiceError> {
        if let Some(spec) = &config.probe {
            let t = self.gateway.decisions_made();
            let x = spec.point(registry, t, 0.0)?;
            if self.probe.len() == PROBE_LIMIT {
                self.probe.remove(0);
            }
            self.probe.push(ProbeSample { t, p_hat: self.gateway.predict(&x).p_hat });
        }
        Ok(())
    }

    fn expire_due(&mut self, app: &App, now: u64) -> Result<usize, ServiceError> {
        let due: Vec<u64> = self
            .decisions
            .values()
            .filter(|d| d.verdict == Verdict::Ask && !d.answered && !d.expired && d.expires_at_ms <= now)
            .map(|d| d.decision_id)
            .collect();
        for &id in &due {
            let seq = self.seq + 1;
            self.log(&LogEntry::Expired { seq, decision_id: id, at_ms: now })?;
            if let Some(d) = self.decisions.get_mut(&id) {
                d.expired = true;
            }
            self.counters.expired += 1;
            tracing::info!(decision_id = id, "escalation expired without feedback");
            self.emit(app, EventKind::Expired, serde_json::json!({ "decision_id": id, "at_ms": now }));
        }
        Ok(due.len())
    }

    fn telemetry(&self, config: &ServiceConfig) -> Telemetry {
        let n = self.recent.len();
        let share =
            |v: Verdict| if n == 0 { 0.0 } else { self.recent.iter().filter(|r| **r == v).count() as f64 / n as f64 };
        let thresholds = self.gateway.thresholds();
        Telemetry {
            decision_count: self.gateway.decisions_made(),
            allow_share: share(Verdict::Allow),
            block_share: share(Verdict::Block),
            ask_share: share(Verdict::Ask),
            window: config.telemetry_window,
            queries: self.counters.queries,
            feedback_count: self.counters.feedback,
            overrides: self.counters.overrides,
            expired: self.counters.expired,
            tau_low: thresholds.tau_low,
            tau_high: thresholds.tau_high,
            probe: self.probe.clone(),
        }
    }

    fn snapshot(&self) -> Result<(), ServiceError> {
        let Some(store) = &self.store else { return Ok(()) };
        store.write_snapshot(&Snapshot {
            seq: self.seq,
            gateway: self.gateway.snapshot(),
            decisions: self.decisions.values().cloned().collect(),
            counters: self.counters,
            recent: self.recent.iter().copied().collect(),
            probe: self.probe.clone(),
        })
    }

    fn replay(&mut self, config: &ServiceConfig, registry: &ToolRegistry, entry: LogEntry) -> Result<(), ServiceError> {
        let seq = entry.seq();
        match entry {
            LogEntry::Decision { decision_id, x, verdict, p_hat, created_at_ms, expires_at_ms, .. } => {
                let d = self.gateway.decide_and_record(&x);
                if d.decision_id != decision_id {
                    return Err(ServiceError::State(format!(
                        "decision id {decision_id} replayed as {}",
                        d.decision_id
                    )));
                }
                self.push_recent(verdict, config.telemetry_window);
                self.counters.queries += u64::from(verdict == Verdict::Ask);
                self.decisions.insert(
                    decision_id,
                    DecisionEntry {
                        decision_id,
                        x,
                        verdict,
                        p_hat,
                        mu_star: d.mu_star,
                        var_star: d.var_star,
                        created_at_ms,
                        expires_at_ms,
                        answered: false,
                        expired: false,
                    },
                );
            }
            LogEntry::Feedback { decision_id, label, x, .. } => {
                self.gateway.ingest(x, label)?;
                if self.decisions.contains_key(&decision_id) {
                    self.mark_answered(decision_id, label);
                }
                self.sample_probe(config, registry)?;
            }
            LogEntry::Expired { decision_id, .. } => {
                if let Some(d) = self.decisions.get_mut(&decision_id) {
                    d.expired = true;
                }
                self.counters.expired += 1;
            }
            LogEntry::Thresholds { thresholds, .. } => self.gateway.set_thresholds(thresholds)?,
        }
        self.seq = seq;
        Ok(())
    }
}
