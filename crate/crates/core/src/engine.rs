//! The enforcement core.
//!
//! [`decide`] runs one request through prompt assembly, the backend and the
//! dual-threshold check. [`PolicyEngine`] wraps it with the deferral queue,
//! the per-user example store, feedback intake and the audit log.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::sync::{Arc, Mutex, MutexGuard};

use chrono::{DateTime, Utc};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audit::{AuditError, AuditEvent, AuditLog, DecideEvent};
use crate::backend::{
    obtain_verdict, BackendError, CompletionRequest, DecisionBackend, RetryPolicy,
};
use crate::model::{
    AccessRequest, Binarize, LlmDecision, ModelConfig, ModelError, PrivacyStatement, Probability,
    TaskId, UserDecision, UserId, Verdict,
};
use crate::prompt::{assemble, ExampleItem};

/// Default in-context example counts (scenario, no-scenario).
pub const DEFAULT_EXAMPLE_COUNTS: (usize, usize) = (4, 4);

/// Confidence thresholds above which verdicts are enforced, per decision kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawThresholds", into = "RawThresholds")]
pub struct ThresholdConfig {
    allow_threshold: f64,
    deny_threshold: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawThresholds {
    allow_threshold: f64,
    deny_threshold: f64,
}

impl TryFrom<RawThresholds> for ThresholdConfig {
    type Error = ModelError;

    fn try_from(raw: RawThresholds) -> Result<Self, Self::Error> {
        ThresholdConfig::new(raw.allow_threshold, raw.deny_threshold)
    }
}

impl From<ThresholdConfig> for RawThresholds {
    fn from(t: ThresholdConfig) -> Self {
        Self {
            allow_threshold: t.allow_threshold,
            deny_threshold: t.deny_threshold,
        }
    }
}

impl ThresholdConfig {
    pub fn new(allow_threshold: f64, deny_threshold: f64) -> Result<Self, ModelError> {
        Probability::new(allow_threshold)?;
        Probability::new(deny_threshold)?;
        Ok(Self {
            allow_threshold,
            deny_threshold,
        })
    }

    pub fn allow_threshold(&self) -> f64 {
        self.allow_threshold
    }

    pub fn deny_threshold(&self) -> f64 {
        self.deny_threshold
    }

    /// Threshold applying to a decision; `once` uses the allow threshold.
    pub fn threshold_for(&self, decision: LlmDecision) -> f64 {
        match decision {
            LlmDecision::Allow | LlmDecision::Once => self.allow_threshold,
            LlmDecision::Deny => self.deny_threshold,
        }
    }

    /// Whether a verdict is enforced. Comparison is inclusive; a verdict
    /// without confidence passes only when both thresholds are zero.
    pub fn admits(&self, decision: LlmDecision, confidence: Option<Probability>) -> bool {
        match confidence {
            Some(c) => c.value() >= self.threshold_for(decision),
            None => self.allow_threshold == 0.0 && self.deny_threshold == 0.0,
        }
    }
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        Self {
            allow_threshold: 1.0,
            deny_threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutcomeStatus {
    Enforced,
    Deferred,
}

/// Result of mediating one request.
///
/// `verdict` is absent only when the backend failed, in which case `error`
/// says why and the outcome is always deferred.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyOutcome {
    pub status: OutcomeStatus,
    pub verdict: Option<Verdict>,
    pub enforced_decision: Option<LlmDecision>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<BackendError>,
}

impl PolicyOutcome {
    fn from_verdict(verdict: Verdict, thresholds: &ThresholdConfig) -> Self {
        if thresholds.admits(verdict.decision, verdict.confidence) {
            Self {
                status: OutcomeStatus::Enforced,
                enforced_decision: Some(verdict.decision),
                verdict: Some(verdict),
                error: None,
            }
        } else {
            Self {
                status: OutcomeStatus::Deferred,
                verdict: Some(verdict),
                enforced_decision: None,
                error: None,
            }
        }
    }

    fn failed(error: BackendError) -> Self {
        Self {
            status: OutcomeStatus::Deferred,
            verdict: None,
            enforced_decision: None,
            error: Some(error),
        }
    }

    pub fn is_enforced(&self) -> bool {
        self.status == OutcomeStatus::Enforced
    }
}

/// Inputs to a single decision.
#[derive(Debug, Clone, Copy)]
pub struct DecisionInput<'a> {
    pub user_id: &'a UserId,
    pub request: &'a AccessRequest,
    pub statement: Option<&'a PrivacyStatement>,
    pub thresholds: ThresholdConfig,
    pub model: &'a ModelConfig,
    pub examples: &'a [ExampleItem],
    pub general_feedback: Option<&'a str>,
}

/// Obtains a verdict and applies the thresholds. Backend failures defer.
pub fn decide(
    backend: &dyn DecisionBackend,
    retry: RetryPolicy,
    input: &DecisionInput<'_>,
) -> PolicyOutcome {
    let statement = if input.model.personalized {
        input.statement
    } else {
        None
    };
    let messages = assemble(
        statement,
        input.request,
        input.examples,
        input.general_feedback,
    );
    let completion = CompletionRequest {
        messages: &messages,
        model: input.model,
        user_id: input.user_id,
        task_id: &input.request.id,
    };
    match obtain_verdict(backend, &completion, retry) {
        Ok(verdict) => PolicyOutcome::from_verdict(verdict, &input.thresholds),
        Err(err) => PolicyOutcome::failed(err),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DeferralId(pub String);

impl DeferralId {
    fn from_seq(seq: u64) -> Self {
        Self(format!("d-{seq:06}"))
    }
}

impl fmt::Display for DeferralId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A request awaiting, or having received, a manual decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeferralEntry {
    pub id: DeferralId,
    pub user_id: UserId,
    pub request: AccessRequest,
    pub verdict: Option<Verdict>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<BackendError>,
    pub created_at: DateTime<Utc>,
    pub resolution: Option<UserDecision>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackResponse {
    Yes,
    No,
    NotSure,
}

/// What the assistant did (or did not) take into account.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackReason {
    Personal,
    Details,
    App,
    Other,
}

/// A user's rating of a verdict they were shown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackRecord {
    pub user_id: UserId,
    pub task_id: TaskId,
    pub shown_verdict: Verdict,
    pub response: FeedbackResponse,
    #[serde(default)]
    pub reasons: BTreeSet<FeedbackReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub free_text: Option<String>,
}

impl FeedbackRecord {
    pub fn validate(&self) -> Result<(), EngineError> {
        if matches!(self.response, FeedbackResponse::Yes | FeedbackResponse::No)
            && self.reasons.is_empty()
        {
            return Err(EngineError::Invalid(
                "feedback with a yes/no response needs at least one reason".into(),
            ));
        }
        Ok(())
    }

    fn actionable_text(&self) -> Option<&str> {
        self.free_text
            .as_deref()
            .map(str::trim)
            .filter(|t| !t.is_empty())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackAck {
    pub stored: usize,
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("unknown deferral `{0}`")]
    UnknownDeferral(DeferralId),
    #[error("deferral `{0}` is already resolved")]
    AlreadyResolved(DeferralId),
    #[error("audit log: {0}")]
    Storage(#[from] AuditError),
}

impl From<ModelError> for EngineError {
    fn from(e: ModelError) -> Self {
        EngineError::Invalid(e.to_string())
    }
}

/// A request as submitted to the engine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mediation {
    pub user_id: UserId,
    pub request: AccessRequest,
    pub model: ModelConfig,
    #[serde(default)]
    pub thresholds: Option<ThresholdConfig>,
    /// Overrides the registered statement for this call.
    #[serde(default)]
    pub statement: Option<PrivacyStatement>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MediationResult {
    pub outcome: PolicyOutcome,
    pub deferral: Option<DeferralEntry>,
}

#[derive(Debug, Default)]
pub(crate) struct EngineState {
    pub(crate) next_seq: u64,
    pub(crate) next_deferral: u64,
    pub(crate) deferrals: Vec<DeferralEntry>,
    pub(crate) examples: HashMap<UserId, Vec<ExampleItem>>,
    pub(crate) feedback: Vec<FeedbackRecord>,
    pub(crate) statements: HashMap<UserId, PrivacyStatement>,
}

impl EngineState {
    pub(crate) fn push_deferral(
        &mut self,
        id: Option<DeferralId>,
        user_id: &UserId,
        request: &AccessRequest,
        outcome: &PolicyOutcome,
        created_at: DateTime<Utc>,
    ) -> DeferralEntry {
        self.next_deferral += 1;
        let id = id.unwrap_or_else(|| DeferralId::from_seq(self.next_deferral));
        let entry = DeferralEntry {
            id,
            user_id: user_id.clone(),
            request: request.clone(),
            verdict: outcome.verdict.clone(),
            error: outcome.error.clone(),
            created_at,
            resolution: None,
        };
        self.deferrals.push(entry.clone());
        entry
    }

    pub(crate) fn resolve(
        &mut self,
        id: &DeferralId,
        decision: UserDecision,
    ) -> Result<DeferralEntry, EngineError> {
        let entry = self
            .deferrals
            .iter_mut()
            .find(|e| &e.id == id)
            .ok_or_else(|| EngineError::UnknownDeferral(id.clone()))?;
        if entry.resolution.is_some() {
            return Err(EngineError::AlreadyResolved(id.clone()));
        }
        entry.request.check_user_decision(decision)?;
        entry.resolution = Some(decision);
        let entry = entry.clone();
        if decision.binarize().is_some() {
            let item = ExampleItem::new(entry.request.clone(), decision)
                .map_err(|e| EngineError::Invalid(e.to_string()))?;
            self.examples
                .entry(entry.user_id.clone())
                .or_default()
                .push(item);
        }
        Ok(entry)
    }

    pub(crate) fn general_feedback(&self, user_id: &UserId) -> Option<String> {
        let texts: Vec<&str> = self
            .feedback
            .iter()
            .filter(|f| &f.user_id == user_id)
            .filter_map(FeedbackRecord::actionable_text)
            .collect();
        (!texts.is_empty()).then(|| texts.join("\n"))
    }

    pub(crate) fn select_examples(
        &self,
        seed: u64,
        user_id: &UserId,
        k_scenario: usize,
        k_no_scenario: usize,
    ) -> Vec<ExampleItem> {
        let Some(store) = self.examples.get(user_id) else {
            return Vec::new();
        };
        let (scenario, plain): (Vec<usize>, Vec<usize>) =
            (0..store.len()).partition(|&i| store[i].request.task_type.has_scenario());
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stable_hash(user_id.as_str()));
        let mut pick = |pool: &[usize], k: usize| -> Vec<usize> {
            let k = k.min(pool.len());
            sample(&mut rng, pool.len(), k)
                .into_iter()
                .map(|i| pool[i])
                .collect()
        };
        let mut chosen = pick(&scenario, k_scenario);
        chosen.extend(pick(&plain, k_no_scenario));
        chosen.sort_unstable();
        chosen.into_iter().map(|i| store[i].clone()).collect()
    }
}

/// FNV-1a; stable across runs and platforms.
fn stable_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Engine settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub default_thresholds: ThresholdConfig,
    pub retry: RetryPolicy,
    pub example_seed: u64,
    pub example_counts: (usize, usize),
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            default_thresholds: ThresholdConfig::default(),
            retry: RetryPolicy::default(),
            example_seed: 0x5eed,
            example_counts: DEFAULT_EXAMPLE_COUNTS,
        }
    }
}

/// Decision point with deferral queue, example store and audit trail.
pub struct PolicyEngine {
    backend: Arc<dyn DecisionBackend>,
    config: EngineConfig,
    state: Mutex<EngineState>,
    audit: Option<Mutex<AuditLog>>,
}

impl PolicyEngine {
    pub fn new(backend: Arc<dyn DecisionBackend>, config: EngineConfig) -> Self {
        Self {
            backend,
            config,
            state: Mutex::new(EngineState::default()),
            audit: None,
        }
    }

    /// Appends every decision, resolution and feedback event to `path`.
    pub fn with_audit_log(mut self, path: &Path) -> Result<Self, EngineError> {
        self.audit = Some(Mutex::new(AuditLog::open(path)?));
        Ok(self)
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    fn state(&self) -> MutexGuard<'_, EngineState> {
        self.state.lock().expect("engine state poisoned")
    }

    fn append(&self, state: &mut EngineState, event: AuditEvent) -> Result<(), EngineError> {
        state.next_seq += 1;
        if let Some(log) = &self.audit {
            log.lock()
                .expect("audit log poisoned")
                .append(&event.with_seq(state.next_seq))?;
        }
        Ok(())
    }

    pub fn register_statement(&self, statement: PrivacyStatement) -> Result<(), EngineError> {
        statement.validate()?;
        self.state()
            .statements
            .insert(statement.user_id.clone(), statement);
        Ok(())
    }

    pub fn statement(&self, user_id: &UserId) -> Option<PrivacyStatement> {
        self.state().statements.get(user_id).cloned()
    }

    /// Decides a request, audits it and queues it when deferred.
    pub fn mediate(&self, mediation: &Mediation) -> Result<MediationResult, EngineError> {
        mediation.request.validate()?;
        mediation.model.validate()?;
        let thresholds = mediation
            .thresholds
            .unwrap_or(self.config.default_thresholds);
        let (k_scenario, k_plain) = self.config.example_counts;

        let (statement, examples, general_feedback) = {
            let state = self.state();
            let statement = mediation
                .statement
                .clone()
                .or_else(|| state.statements.get(&mediation.user_id).cloned());
            let examples = state.select_examples(
                self.config.example_seed,
                &mediation.user_id,
                k_scenario,
                k_plain,
            );
            (
                statement,
                examples,
                state.general_feedback(&mediation.user_id),
            )
        };

        let input = DecisionInput {
            user_id: &mediation.user_id,
            request: &mediation.request,
            statement: statement.as_ref(),
            thresholds,
            model: &mediation.model,
            examples: &examples,
            general_feedback: general_feedback.as_deref(),
        };
        let outcome = decide(self.backend.as_ref(), self.config.retry, &input);

        let mut state = self.state();
        let now = Utc::now();
        let deferral = (outcome.status == OutcomeStatus::Deferred).then(|| {
            state.push_deferral(None, &mediation.user_id, &mediation.request, &outcome, now)
        });
        let event = AuditEvent::Decide(Box::new(DecideEvent {
            seq: 0,
            timestamp: now,
            user_id: mediation.user_id.clone(),
            request: mediation.request.clone(),
            model: mediation.model.clone(),
            thresholds,
            statement: if mediation.model.personalized {
                statement
            } else {
                None
            },
            examples,
            general_feedback,
            outcome: outcome.clone(),
            deferral_id: deferral.as_ref().map(|d| d.id.clone()),
        }));
        self.append(&mut state, event)?;
        Ok(MediationResult { outcome, deferral })
    }

    /// Queues a deferred verdict for manual review.
    pub fn enqueue_deferral(
        &self,
        user_id: &UserId,
        request: &AccessRequest,
        outcome: &PolicyOutcome,
    ) -> DeferralEntry {
        self.state()
            .push_deferral(None, user_id, request, outcome, Utc::now())
    }

    /// Unresolved entries in creation order, optionally for one user.
    pub fn list_pending(&self, user_id: Option<&UserId>) -> Vec<DeferralEntry> {
        self.state()
            .deferrals
            .iter()
            .filter(|e| e.resolution.is_none())
            .filter(|e| user_id.is_none_or(|u| &e.user_id == u))
            .cloned()
            .collect()
    }

    pub fn deferral(&self, id: &DeferralId) -> Option<DeferralEntry> {
        self.state().deferrals.iter().find(|e| &e.id == id).cloned()
    }

    /// Records the user's manual decision. Decisions other than `not sure` /
    /// `would never` join the user's example store.
    pub fn resolve_deferral(
        &self,
        id: &DeferralId,
        decision: UserDecision,
    ) -> Result<DeferralEntry, EngineError> {
        let mut state = self.state();
        let entry = state.resolve(id, decision)?;
        self.append(
            &mut state,
            AuditEvent::Resolve {
                seq: 0,
                timestamp: Utc::now(),
                deferral_id: id.clone(),
                decision,
            },
        )?;
        Ok(entry)
    }

    /// Stores feedback; free text becomes general guidance in later prompts.
    pub fn record_feedback(&self, feedback: FeedbackRecord) -> Result<FeedbackAck, EngineError> {
        feedback.validate()?;
        let mut state = self.state();
        state.feedback.push(feedback.clone());
        let stored = state.feedback.len();
        self.append(
            &mut state,
            AuditEvent::Feedback {
                seq: 0,
                timestamp: Utc::now(),
                feedback,
            },
        )?;
        Ok(FeedbackAck { stored })
    }

    pub fn feedback_for(&self, user_id: Option<&UserId>) -> Vec<FeedbackRecord> {
        self.state()
            .feedback
            .iter()
            .filter(|f| user_id.is_none_or(|u| &f.user_id == u))
            .cloned()
            .collect()
    }

    pub fn general_feedback(&self, user_id: &UserId) -> Option<String> {
        self.state().general_feedback(user_id)
    }

    /// Seeded selection of up to `k_scenario` scenario and `k_no_scenario`
    /// no-scenario examples, returned in insertion order.
    pub fn select_examples(
        &self,
        user_id: &UserId,
        k_scenario: usize,
        k_no_scenario: usize,
    ) -> Vec<ExampleItem> {
        self.state()
            .select_examples(self.config.example_seed, user_id, k_scenario, k_no_scenario)
    }

    pub fn example_store(&self, user_id: &UserId) -> Vec<ExampleItem> {
        self.state()
            .examples
            .get(user_id)
            .cloned()
            .unwrap_or_default()
    }

    /// Adds an already-known user decision to the example store.
    pub fn add_example(&self, user_id: &UserId, item: ExampleItem) {
        self.state()
            .examples
            .entry(user_id.clone())
            .or_default()
            .push(item);
    }
}
