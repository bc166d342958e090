//! Append-only audit trail and deterministic replay.
//!
//! One JSON object per line. The first line of a non-empty log is a schema
//! header; each following line is an [`AuditEvent`]. Replaying a log re-runs
//! every recorded decision against a backend and rebuilds the deferral queue.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{DecisionBackend, RetryPolicy};
use crate::engine::{
    decide, DecisionInput, DeferralEntry, DeferralId, EngineState, FeedbackRecord, OutcomeStatus,
    PolicyOutcome, ThresholdConfig,
};
use crate::jsonl::{Header, SCHEMA_VERSION};
use crate::model::{AccessRequest, ModelConfig, PrivacyStatement, UserDecision, UserId};
use crate::prompt::ExampleItem;

pub const AUDIT_SCHEMA: &str = "permgate.audit";

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line} (byte offset {offset}): {message}")]
    Parse {
        line: usize,
        offset: usize,
        message: String,
    },
}

/// Everything needed to re-run one decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecideEvent {
    pub seq: u64,
    pub timestamp: DateTime<Utc>,
    pub user_id: UserId,
    pub request: AccessRequest,
    pub model: ModelConfig,
    pub thresholds: ThresholdConfig,
    #[serde(default)]
    pub statement: Option<PrivacyStatement>,
    #[serde(default)]
    pub examples: Vec<ExampleItem>,
    #[serde(default)]
    pub general_feedback: Option<String>,
    pub outcome: PolicyOutcome,
    #[serde(default)]
    pub deferral_id: Option<DeferralId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case", deny_unknown_fields)]
pub enum AuditEvent {
    Decide(Box<DecideEvent>),
    Resolve {
        seq: u64,
        timestamp: DateTime<Utc>,
        deferral_id: DeferralId,
        decision: UserDecision,
    },
    Feedback {
        seq: u64,
        timestamp: DateTime<Utc>,
        feedback: FeedbackRecord,
    },
}

impl AuditEvent {
    pub fn seq(&self) -> u64 {
        match self {
            AuditEvent::Decide(e) => e.seq,
            AuditEvent::Resolve { seq, .. } | AuditEvent::Feedback { seq, .. } => *seq,
        }
    }

    pub(crate) fn with_seq(mut self, value: u64) -> Self {
        match &mut self {
            AuditEvent::Decide(e) => e.seq = value,
            AuditEvent::Resolve { seq, .. } | AuditEvent::Feedback { seq, .. } => *seq = value,
        }
        self
    }
}

/// Append-only JSONL writer; flushes after each event.
pub struct AuditLog {
    path: PathBuf,
    writer: BufWriter<File>,
}

impl AuditLog {
    pub fn open(path: &Path) -> Result<Self, AuditError> {
        let io = |source| AuditError::Io {
            path: path.to_owned(),
            source,
        };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(io)?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io)?;
        let empty = file.metadata().map_err(io)?.len() == 0;
        let mut log = Self {
            path: path.to_owned(),
            writer: BufWriter::new(file),
        };
        if empty {
            let header = serde_json::to_string(&Header::new(AUDIT_SCHEMA)).expect("header");
            log.write_line(&header)?;
        }
        Ok(log)
    }

    fn write_line(&mut self, line: &str) -> Result<(), AuditError> {
        let io = |source| AuditError::Io {
            path: self.path.clone(),
            source,
        };
        writeln!(self.writer, "{line}").map_err(io)?;
        self.writer.flush().map_err(io)
    }

    pub fn append(&mut self, event: &AuditEvent) -> Result<(), AuditError> {
        let line = serde_json::to_string(event).expect("audit event serializes");
        self.write_line(&line)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Parses a whole log. An empty log yields no events. A line that does not
/// parse (including a truncated final line) is an error carrying its byte
/// offset.
pub fn parse_log(text: &str) -> Result<Vec<AuditEvent>, AuditError> {
    let mut events = Vec::new();
    let mut offset = 0usize;
    let mut saw_header = false;
    for (idx, raw_line) in text.split_inclusive('\n').enumerate() {
        let line_offset = offset;
        offset += raw_line.len();
        let line = raw_line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| AuditError::Parse {
            line: idx + 1,
            offset: line_offset,
            message,
        };
        if !saw_header {
            let header: Header =
                serde_json::from_str(line).map_err(|e| err(format!("invalid header: {e}")))?;
            if header.schema != AUDIT_SCHEMA {
                return Err(err(format!(
                    "not an audit log (schema `{}`)",
                    header.schema
                )));
            }
            if header.schema_version > SCHEMA_VERSION {
                return Err(err(format!(
                    "unsupported schema_version {}",
                    header.schema_version
                )));
            }
            saw_header = true;
            continue;
        }
        if !raw_line.ends_with('\n') && serde_json::from_str::<serde_json::Value>(line).is_err() {
            return Err(err("truncated record".into()));
        }
        events.push(serde_json::from_str(line).map_err(|e| err(e.to_string()))?);
    }
    Ok(events)
}

pub fn read_log(path: &Path) -> Result<Vec<AuditEvent>, AuditError> {
    let text = std::fs::read_to_string(path).map_err(|source| AuditError::Io {
        path: path.to_owned(),
        source,
    })?;
    parse_log(&text)
}

/// A recorded decision whose re-execution gave a different outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub seq: u64,
    pub task_id: String,
    pub recorded: PolicyOutcome,
    pub replayed: PolicyOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub decisions: usize,
    pub enforced: usize,
    pub deferred: usize,
    pub resolutions: usize,
    pub feedback: usize,
    pub pending: Vec<DeferralEntry>,
    pub resolved: Vec<DeferralEntry>,
    pub divergences: Vec<Divergence>,
}

fn same_outcome(a: &PolicyOutcome, b: &PolicyOutcome) -> bool {
    a.status == b.status
        && a.enforced_decision == b.enforced_decision
        && a.verdict == b.verdict
        && a.error.as_ref().map(|e| e.kind) == b.error.as_ref().map(|e| e.kind)
}

/// Re-executes every decision and rebuilds queue state.
pub fn replay(
    events: &[AuditEvent],
    backend: &dyn DecisionBackend,
    retry: RetryPolicy,
) -> Result<ReplayReport, AuditError> {
    let mut state = EngineState::default();
    let mut report = ReplayReport {
        decisions: 0,
        enforced: 0,
        deferred: 0,
        resolutions: 0,
        feedback: 0,
        pending: Vec::new(),
        resolved: Vec::new(),
        divergences: Vec::new(),
    };
    for event in events {
        match event {
            AuditEvent::Decide(e) => {
                report.decisions += 1;
                let input = DecisionInput {
                    user_id: &e.user_id,
                    request: &e.request,
                    statement: e.statement.as_ref(),
                    thresholds: e.thresholds,
                    model: &e.model,
                    examples: &e.examples,
                    general_feedback: e.general_feedback.as_deref(),
                };
                let replayed = decide(backend, retry, &input);
                match replayed.status {
                    OutcomeStatus::Enforced => report.enforced += 1,
                    OutcomeStatus::Deferred => report.deferred += 1,
                }
                if !same_outcome(&e.outcome, &replayed) {
                    report.divergences.push(Divergence {
                        seq: e.seq,
                        task_id: e.request.id.to_string(),
                        recorded: e.outcome.clone(),
                        replayed: replayed.clone(),
                    });
                }
                if let Some(id) = &e.deferral_id {
                    state.push_deferral(
                        Some(id.clone()),
                        &e.user_id,
                        &e.request,
                        &e.outcome,
                        e.timestamp,
                    );
                }
            }
            AuditEvent::Resolve {
                deferral_id,
                decision,
                ..
            } => {
                report.resolutions += 1;
                state
                    .resolve(deferral_id, *decision)
                    .map_err(|err| AuditError::Parse {
                        line: 0,
                        offset: 0,
                        message: format!("inconsistent resolve for `{deferral_id}`: {err}"),
                    })?;
            }
            AuditEvent::Feedback { feedback, .. } => {
                report.feedback += 1;
                state.feedback.push(feedback.clone());
            }
        }
    }
    let (resolved, pending) = state
        .deferrals
        .into_iter()
        .partition(|e| e.resolution.is_some());
    report.pending = pending;
    report.resolved = resolved;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_log_is_empty() {
        assert!(parse_log("").unwrap().is_empty());
        assert!(parse_log("\n\n").unwrap().is_empty());
    }

    #[test]
    fn truncated_log_reports_offset() {
        let header = serde_json::to_string(&Header::new(AUDIT_SCHEMA)).unwrap();
        let text = format!("{header}\n{{\"event\":\"resolve\",\"seq\":1,");
        match parse_log(&text).unwrap_err() {
            AuditError::Parse { line, offset, .. } => {
                assert_eq!(line, 2);
                assert_eq!(offset, header.len() + 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wrong_schema_rejected() {
        assert!(parse_log("{\"schema\":\"permgate.tasks\",\"schema_version\":1}\n").is_err());
    }
}
