//! Append-only event log plus periodic snapshots. Replaying the log on top of
//! the latest snapshot refits the gateway to the same state.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use trustgate_core::features::DecisionPoint;
use trustgate_core::gateway::{GatewaySnapshot, Thresholds, Verdict};
use trustgate_core::inference::Label;

use crate::error::ServiceError;
use crate::schema::ProbeSample;

pub const LOG_FILE: &str = "events.jsonl";
pub const SNAPSHOT_FILE: &str = "snapshot.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogEntry {
    Decision {
        seq: u64,
        decision_id: u64,
        x: DecisionPoint,
        verdict: Verdict,
        p_hat: f64,
        created_at_ms: u64,
        expires_at_ms: u64,
    },
    Feedback {
        seq: u64,
        decision_id: u64,
        label: Label,
        /// The decision's point restamped at the answer step.
        x: DecisionPoint,
    },
    Expired {
        seq: u64,
        decision_id: u64,
        at_ms: u64,
    },
    Thresholds {
        seq: u64,
        thresholds: Thresholds,
    },
}

impl LogEntry {
    pub fn seq(&self) -> u64 {
        match self {
            LogEntry::Decision { seq, .. }
            | LogEntry::Feedback { seq, .. }
            | LogEntry::Expired { seq, .. }
            | LogEntry::Thresholds { seq, .. } => *seq,
        }
    }
}

/// Everything a decision needs for later feedback and listing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionEntry {
    pub decision_id: u64,
    pub x: DecisionPoint,
    pub verdict: Verdict,
    pub p_hat: f64,
    pub mu_star: f64,
    pub var_star: f64,
    pub created_at_ms: u64,
    pub expires_at_ms: u64,
    pub answered: bool,
    pub expired: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub queries: u64,
    pub feedback: u64,
    pub overrides: u64,
    pub expired: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    /// Last log sequence number reflected in this snapshot.
    pub seq: u64,
    pub gateway: GatewaySnapshot,
    pub decisions: Vec<DecisionEntry>,
    pub counters: Counters,
    pub recent: Vec<Verdict>,
    pub probe: Vec<ProbeSample>,
}

#[derive(Debug)]
pub struct Store {
    dir: PathBuf,
    log: File,
}

impl Store {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, ServiceError> {
        let dir = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&dir)?;
        truncate_torn_tail(&dir.join(LOG_FILE))?;
        let log = OpenOptions::new().create(true).append(true).open(dir.join(LOG_FILE))?;
        Ok(Self { dir, log })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn append(&mut self, entry: &LogEntry) -> Result<(), ServiceError> {
        let mut line = serde_json::to_vec(entry)?;
        line.push(b'\n');
        self.log.write_all(&line)?;
        self.log.flush()?;
        Ok(())
    }

    pub fn write_snapshot(&self, snapshot: &Snapshot) -> Result<(), ServiceError> {
        let tmp = self.dir.join(format!("{SNAPSHOT_FILE}.tmp"));
        std::fs::write(&tmp, serde_json::to_vec(snapshot)?)?;
        std::fs::rename(tmp, self.dir.join(SNAPSHOT_FILE))?;
        Ok(())
    }

    pub fn read_snapshot(&self) -> Result<Option<Snapshot>, ServiceError> {
        let path = self.dir.join(SNAPSHOT_FILE);
        if !path.exists() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_slice(&std::fs::read(path)?)?))
    }

    /// Log entries in order.
    pub fn read_log(&self) -> Result<Vec<LogEntry>, ServiceError> {
        let file = File::open(self.dir.join(LOG_FILE))?;
        let lines: Vec<String> = BufReader::new(file).lines().collect::<Result<_, _>>()?;
        let mut entries = Vec::with_capacity(lines.len());
        for (i, line) in lines.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(line) {
                Ok(entry) => entries.push(entry),
                Err(e) => return Err(ServiceError::State(format!("log line {}: {e}", i + 1))),
            }
        }
        Ok(entries)
    }
}

/// Cuts a partial final line left by a crash mid-append.
fn truncate_torn_tail(path: &Path) -> Result<(), ServiceError> {
    let Ok(bytes) = std::fs::read(path) else { return Ok(()) };
    if bytes.is_empty() || bytes.ends_with(b"\n") {
        return Ok(());
    }
    let keep = bytes.iter().rposition(|b| *b == b'\n').map_or(0, |i| i + 1);
    tracing::warn!(dropped = bytes.len() - keep, "truncating torn log tail");
    OpenOptions::new().write(true).open(path)?.set_len(keep as u64)?;
    Ok(())
}
