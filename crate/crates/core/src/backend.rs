//! Decision-model backends and verdict parsing.
//!
//! A backend turns a prompt into a [`RawCompletion`]: the decision token, the
//! justification and, when available, the decision token's log-probability.
//! Confidence is the probability of that single token.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::jsonl::{self, JsonlError};
use crate::model::{
    normalize_token, LlmDecision, ModelConfig, Probability, TaskId, UserId, Verdict,
};
use crate::prompt::PromptMessage;

/// User key used by scripts for generic (non-personalized) models.
pub const GENERIC_USER: &str = "GENERIC";

pub const SCRIPT_SCHEMA: &str = "permgate.scripts";

/// Unparsed model output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawCompletion {
    pub decision_token: String,
    pub justification_text: String,
    #[serde(default)]
    pub decision_token_logprob: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendErrorKind {
    Transport,
    Timeout,
    InvalidOutput,
    MissingLogprobs,
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("{kind:?}: {detail}")]
pub struct BackendError {
    pub kind: BackendErrorKind,
    pub detail: String,
}

impl BackendError {
    pub fn new(kind: BackendErrorKind, detail: impl Into<String>) -> Self {
        Self {
            kind,
            detail: detail.into(),
        }
    }

    pub fn transport(detail: impl Into<String>) -> Self {
        Self::new(BackendErrorKind::Transport, detail)
    }

    pub fn invalid_output(detail: impl Into<String>) -> Self {
        Self::new(BackendErrorKind::InvalidOutput, detail)
    }

    /// Transport and timeout failures may be retried; invalid output is
    /// retried only up to [`RetryPolicy::invalid_output_retries`].
    pub fn is_retryable(&self) -> bool {
        !matches!(self.kind, BackendErrorKind::MissingLogprobs)
    }
}

/// Everything a backend may look at for one inference call.
#[derive(Debug, Clone, Copy)]
pub struct CompletionRequest<'a> {
    pub messages: &'a [PromptMessage],
    pub model: &'a ModelConfig,
    pub user_id: &'a UserId,
    pub task_id: &'a TaskId,
}

/// One inference call. Implementations must not keep conversation state
/// between calls.
pub trait DecisionBackend: Send + Sync {
    fn complete(&self, request: &CompletionRequest<'_>) -> Result<RawCompletion, BackendError>;
}

impl<B: DecisionBackend + ?Sized> DecisionBackend for std::sync::Arc<B> {
    fn complete(&self, request: &CompletionRequest<'_>) -> Result<RawCompletion, BackendError> {
        (**self).complete(request)
    }
}

/// `exp(logprob)` of the decision token, or `None` without logprobs.
pub fn extract_confidence(raw: &RawCompletion) -> Option<Probability> {
    let logprob = raw.decision_token_logprob?;
    if logprob.is_nan() {
        return None;
    }
    Probability::new(logprob.min(0.0).exp()).ok()
}

/// Maps a raw completion into a [`Verdict`].
pub fn parse_verdict(raw: &RawCompletion) -> Result<Verdict, BackendError> {
    let decision = LlmDecision::from_token(&raw.decision_token).ok_or_else(|| {
        BackendError::invalid_output(format!(
            "decision token `{}` is not one of allow/once/deny",
            raw.decision_token
        ))
    })?;
    Verdict::new(
        decision,
        raw.justification_text.trim(),
        extract_confidence(raw),
    )
    .map_err(|e| BackendError::invalid_output(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub invalid_output_retries: u32,
    pub transport_retries: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            invalid_output_retries: 2,
            transport_retries: 2,
        }
    }
}

/// Completes and parses with bounded retries, re-sending the same prompt.
pub fn obtain_verdict(
    backend: &dyn DecisionBackend,
    request: &CompletionRequest<'_>,
    policy: RetryPolicy,
) -> Result<Verdict, BackendError> {
    let mut invalid = 0;
    let mut transport = 0;
    loop {
        let err = match backend
            .complete(request)
            .and_then(|raw| parse_verdict(&raw))
        {
            Ok(verdict) => return Ok(verdict),
            Err(err) => err,
        };
        let budget = match err.kind {
            BackendErrorKind::InvalidOutput => {
                invalid += 1;
                invalid <= policy.invalid_output_retries
            }
            BackendErrorKind::Transport | BackendErrorKind::Timeout => {
                transport += 1;
                transport <= policy.transport_retries
            }
            BackendErrorKind::MissingLogprobs => false,
        };
        if !budget {
            return Err(err);
        }
    }
}

/// Who a script entry answers for.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ScriptKey {
    pub model_id: String,
    pub user_id: String,
    pub task_id: TaskId,
}

impl ScriptKey {
    /// Generic models are keyed by [`GENERIC_USER`], personalized ones by user.
    pub fn for_request(request: &CompletionRequest<'_>) -> Self {
        let user_id = if request.model.personalized {
            request.user_id.to_string()
        } else {
            GENERIC_USER.to_owned()
        };
        Self {
            model_id: request.model.model_id.clone(),
            user_id,
            task_id: request.task_id.clone(),
        }
    }
}

/// One line of a scripted-backend fixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptEntry {
    pub model_id: String,
    pub user_id: String,
    pub task_id: TaskId,
    pub decision: String,
    pub justification: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprob: Option<f64>,
}

impl ScriptEntry {
    pub fn key(&self) -> ScriptKey {
        ScriptKey {
            model_id: self.model_id.clone(),
            user_id: self.user_id.clone(),
            task_id: self.task_id.clone(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error(transparent)]
    File(#[from] JsonlError),
    #[error("duplicate script entry for model `{0}`, user `{1}`, task `{2}`")]
    Duplicate(String, String, TaskId),
}

/// Deterministic backend answering from a fixture table. Read-only after load.
#[derive(Debug, Default, Clone)]
pub struct ScriptedBackend {
    entries: HashMap<ScriptKey, RawCompletion>,
}

impl ScriptedBackend {
    pub fn from_entries(
        entries: impl IntoIterator<Item = ScriptEntry>,
    ) -> Result<Self, ScriptError> {
        let mut map = HashMap::new();
        for entry in entries {
            let key = entry.key();
            let raw = RawCompletion {
                decision_token: entry.decision,
                justification_text: entry.justification,
                decision_token_logprob: entry.logprob,
            };
            if map.insert(key.clone(), raw).is_some() {
                return Err(ScriptError::Duplicate(
                    key.model_id,
                    key.user_id,
                    key.task_id,
                ));
            }
        }
        Ok(Self { entries: map })
    }

    pub fn load(path: &Path) -> Result<Self, ScriptError> {
        Self::from_entries(jsonl::read::<ScriptEntry>(path, SCRIPT_SCHEMA)?)
    }

    /// Loads and merges several fixture files.
    pub fn load_all<P: AsRef<Path>>(paths: &[P]) -> Result<Self, ScriptError> {
        let mut entries = Vec::new();
        for path in paths {
            entries.extend(jsonl::read::<ScriptEntry>(path.as_ref(), SCRIPT_SCHEMA)?);
        }
        Self::from_entries(entries)
    }

    pub fn get(&self, key: &ScriptKey) -> Option<&RawCompletion> {
        self.entries.get(key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// All entries sorted by key.
    pub fn entries(&self) -> Vec<(&ScriptKey, &RawCompletion)> {
        let mut all: Vec<_> = self.entries.iter().collect();
        all.sort_by(|a, b| a.0.cmp(b.0));
        all
    }
}

impl DecisionBackend for ScriptedBackend {
    fn complete(&self, request: &CompletionRequest<'_>) -> Result<RawCompletion, BackendError> {
        let key = ScriptKey::for_request(request);
        let mut raw = self.entries.get(&key).cloned().ok_or_else(|| {
            BackendError::transport(format!(
                "no script entry for model `{}`, user `{}`, task `{}`",
                key.model_id, key.user_id, key.task_id
            ))
        })?;
        if !request.model.request_confidence {
            raw.decision_token_logprob = None;
        }
        raw.decision_token = normalize_token(&raw.decision_token);
        Ok(raw)
    }
}

/// Wraps a backend and keeps every prompt it was sent.
#[derive(Debug, Default)]
pub struct RecordingBackend<B> {
    inner: B,
    prompts: Mutex<Vec<Vec<PromptMessage>>>,
}

impl<B> RecordingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            prompts: Mutex::new(Vec::new()),
        }
    }

    pub fn prompts(&self) -> Vec<Vec<PromptMessage>> {
        self.prompts.lock().expect("prompt log poisoned").clone()
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }
}

impl<B: DecisionBackend> DecisionBackend for RecordingBackend<B> {
    fn complete(&self, request: &CompletionRequest<'_>) -> Result<RawCompletion, BackendError> {
        self.prompts
            .lock()
            .expect("prompt log poisoned")
            .push(request.messages.to_vec());
        self.inner.complete(request)
    }
}

/// Connection settings for a chat-completion endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteConfig {
    /// Full URL of the chat-completions endpoint.
    pub endpoint: String,
    /// Environment variable holding the bearer token, if any.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    /// Fail with `MissingLogprobs` instead of returning no confidence.
    #[serde(default)]
    pub require_logprobs: bool,
}

fn default_timeout_secs() -> u64 {
    30
}

/// Chat-completion HTTP client requesting structured output and per-token
/// log-probabilities.
pub struct RemoteBackend {
    config: RemoteConfig,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Result<Self, BackendError> {
        let api_key = config
            .api_key_env
            .as_deref()
            .and_then(|var| std::env::var(var).ok());
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::transport(e.to_string()))?;
        Ok(Self {
            config,
            api_key,
            client,
        })
    }

    /// Request body for one completion.
    pub fn request_body(messages: &[PromptMessage], model: &ModelConfig) -> Value {
        let mut body = json!({
            "model": model.model_id,
            "messages": messages,
            "temperature": model.decoding_temperature,
            "response_format": {
                "type": "json_schema",
                "json_schema": {
                    "name": "access_control_decision",
                    "strict": true,
                    "schema": {
                        "type": "object",
                        "properties": {
                            "decision": {"type": "string", "enum": ["allow", "once", "deny"]},
                            "justification": {"type": "string"}
                        },
                        "required": ["decision", "justification"],
                        "additionalProperties": false
                    }
                }
            }
        });
        if model.request_confidence {
            body["logprobs"] = json!(true);
        }
        body
    }

    /// Extracts the decision, justification and decision-token logprob from a
    /// chat-completion response.
    pub fn parse_response(body: &Value) -> Result<RawCompletion, BackendError> {
        let choice = body
            .pointer("/choices/0")
            .ok_or_else(|| BackendError::invalid_output("response has no choices"))?;
        let content = choice
            .pointer("/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| BackendError::invalid_output("response has no message content"))?;
        #[derive(Deserialize)]
        struct Structured {
            decision: String,
            justification: String,
        }
        let structured: Structured = serde_json::from_str(content)
            .map_err(|e| BackendError::invalid_output(format!("unstructured content: {e}")))?;
        let tokens = choice
            .pointer("/logprobs/content")
            .and_then(Value::as_array);
        let logprob = tokens.and_then(|tokens| decision_token_logprob(content, tokens));
        Ok(RawCompletion {
            decision_token: normalize_token(&structured.decision),
            justification_text: structured.justification,
            decision_token_logprob: logprob,
        })
    }
}

/// Log-probability of the first non-quote token of the `decision` value.
fn decision_token_logprob(content: &str, tokens: &[Value]) -> Option<f64> {
    let key = content.find("\"decision\"")?;
    let after_key = key + "\"decision\"".len();
    let colon = after_key + content[after_key..].find(':')?;
    let quote = colon + content[colon..].find('"')?;
    let value_start = quote + 1;

    let mut offset = 0usize;
    for token in tokens {
        let text = token.get("token")?.as_str()?;
        let end = offset + text.len();
        if end > value_start && !normalize_token(text).is_empty() {
            return token.get("logprob")?.as_f64();
        }
        offset = end;
    }
    None
}

impl DecisionBackend for RemoteBackend {
    fn complete(&self, request: &CompletionRequest<'_>) -> Result<RawCompletion, BackendError> {
        if request.messages.is_empty() {
            return Err(BackendError::invalid_output("empty prompt"));
        }
        let mut http = self
            .client
            .post(&self.config.endpoint)
            .json(&Self::request_body(request.messages, request.model));
        if let Some(key) = &self.api_key {
            http = http.bearer_auth(key);
        }
        let response = http.send().map_err(|e| {
            let kind = if e.is_timeout() {
                BackendErrorKind::Timeout
            } else {
                BackendErrorKind::Transport
            };
            BackendError::new(kind, e.to_string())
        })?;
        let status = response.status();
        if !status.is_success() {
            return Err(BackendError::transport(format!(
                "endpoint returned {status}"
            )));
        }
        let body: Value = response
            .json()
            .map_err(|e| BackendError::invalid_output(format!("invalid JSON body: {e}")))?;
        let raw = Self::parse_response(&body)?;
        if request.model.request_confidence
            && raw.decision_token_logprob.is_none()
            && self.config.require_logprobs
        {
            return Err(BackendError::new(
                BackendErrorKind::MissingLogprobs,
                "endpoint returned no log-probabilities for the decision token",
            ));
        }
        Ok(raw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU32, Ordering};

    fn raw(token: &str, logprob: Option<f64>) -> RawCompletion {
        RawCompletion {
            decision_token: token.into(),
            justification_text: "reason".into(),
            decision_token_logprob: logprob,
        }
    }

    #[test]
    fn confidence_from_logprob() {
        // exp(-0.27444) computed independently: 0.760006...
        let c = extract_confidence(&raw("deny", Some(-0.27444))).unwrap();
        assert!((c.value() - 0.760).abs() < 0.001);
        assert_eq!(
            extract_confidence(&raw("deny", Some(0.0))).unwrap().value(),
            1.0
        );
        assert_eq!(extract_confidence(&raw("deny", None)), None);
    }

    #[test]
    fn parse_verdict_cases() {
        let v = parse_verdict(&raw("deny", Some(0.76f64.ln()))).unwrap();
        assert_eq!(v.decision, LlmDecision::Deny);
        assert!((v.confidence.unwrap().value() - 0.76).abs() < 1e-12);

        let v = parse_verdict(&raw("allow", Some(0.0))).unwrap();
        assert_eq!(v.confidence, Some(Probability::ONE));

        let err = parse_verdict(&raw("maybe", None)).unwrap_err();
        assert_eq!(err.kind, BackendErrorKind::InvalidOutput);

        let v = parse_verdict(&raw("Once", None)).unwrap();
        assert_eq!(v.decision, LlmDecision::Once);
        assert_eq!(v.confidence, None);
    }

    fn scripted() -> ScriptedBackend {
        ScriptedBackend::from_entries([ScriptEntry {
            model_id: "gpt-4o".into(),
            user_id: "demo-user".into(),
            task_id: "foodguide-location".into(),
            decision: "deny".into(),
            justification: "While location access would allow showing nearby options, user indicated to grant access only when really necessary.".into(),
            logprob: Some(0.76f64.ln()),
        }])
        .unwrap()
    }

    #[test]
    fn scripted_lookup_and_missing_key() {
        let backend = scripted();
        let model = ModelConfig::personalized("gpt-4o");
        let user = UserId::from("demo-user");
        let task = TaskId::from("foodguide-location");
        let req = CompletionRequest {
            messages: &[],
            model: &model,
            user_id: &user,
            task_id: &task,
        };
        let a = backend.complete(&req).unwrap();
        let b = backend.complete(&req).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.decision_token, "deny");
        assert!(a.justification_text.contains("only when really necessary"));

        let generic = ModelConfig::generic("gpt-4o");
        let req = CompletionRequest {
            model: &generic,
            ..req
        };
        let err = backend.complete(&req).unwrap_err();
        assert_eq!(err.kind, BackendErrorKind::Transport);
        assert!(err.detail.contains("no script entry"));
    }

    #[test]
    fn duplicate_entries_rejected() {
        let e = ScriptEntry {
            model_id: "m".into(),
            user_id: GENERIC_USER.into(),
            task_id: "t".into(),
            decision: "allow".into(),
            justification: "j".into(),
            logprob: None,
        };
        assert!(ScriptedBackend::from_entries([e.clone(), e]).is_err());
    }

    struct Flaky {
        failures: AtomicU32,
        kind: BackendErrorKind,
    }

    impl DecisionBackend for Flaky {
        fn complete(&self, _: &CompletionRequest<'_>) -> Result<RawCompletion, BackendError> {
            if self.failures.load(Ordering::SeqCst) > 0 {
                self.failures.fetch_sub(1, Ordering::SeqCst);
                return match self.kind {
                    BackendErrorKind::InvalidOutput => Ok(raw("perhaps", None)),
                    kind => Err(BackendError::new(kind, "boom")),
                };
            }
            Ok(raw("allow", Some(-0.1)))
        }
    }

    fn run(backend: &dyn DecisionBackend) -> Result<Verdict, BackendError> {
        let model = ModelConfig::generic("m");
        let user = UserId::from("u");
        let task = TaskId::from("t");
        obtain_verdict(
            backend,
            &CompletionRequest {
                messages: &[],
                model: &model,
                user_id: &user,
                task_id: &task,
            },
            RetryPolicy::default(),
        )
    }

    #[test]
    fn invalid_output_retried_twice() {
        let ok = Flaky {
            failures: AtomicU32::new(2),
            kind: BackendErrorKind::InvalidOutput,
        };
        assert!(run(&ok).is_ok());
        let bad = Flaky {
            failures: AtomicU32::new(3),
            kind: BackendErrorKind::InvalidOutput,
        };
        assert_eq!(run(&bad).unwrap_err().kind, BackendErrorKind::InvalidOutput);
    }

    #[test]
    fn missing_logprobs_not_retried() {
        let b = Flaky {
            failures: AtomicU32::new(1),
            kind: BackendErrorKind::MissingLogprobs,
        };
        assert_eq!(run(&b).unwrap_err().kind, BackendErrorKind::MissingLogprobs);
        assert_eq!(b.failures.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn timeout_retried_within_budget() {
        let b = Flaky {
            failures: AtomicU32::new(2),
            kind: BackendErrorKind::Timeout,
        };
        assert!(run(&b).is_ok());
    }

    #[test]
    fn remote_response_parsing() {
        let body = json!({
            "choices": [{
                "message": {"content": "{\"decision\":\"Deny\",\"justification\":\"not needed\"}"},
                "logprobs": {"content": [
                    {"token": "{\"", "logprob": 0.0},
                    {"token": "decision", "logprob": 0.0},
                    {"token": "\":\"", "logprob": 0.0},
                    {"token": "Deny", "logprob": -0.27444},
                    {"token": "\",\"", "logprob": 0.0}
                ]}
            }]
        });
        let raw = RemoteBackend::parse_response(&body).unwrap();
        assert_eq!(raw.decision_token, "deny");
        assert_eq!(raw.decision_token_logprob, Some(-0.27444));

        let no_lp = json!({"choices": [{"message": {"content": "{\"decision\":\"allow\",\"justification\":\"x\"}"}}]});
        assert_eq!(
            RemoteBackend::parse_response(&no_lp)
                .unwrap()
                .decision_token_logprob,
            None
        );

        let junk = json!({"choices": [{"message": {"content": "allow it"}}]});
        assert_eq!(
            RemoteBackend::parse_response(&junk).unwrap_err().kind,
            BackendErrorKind::InvalidOutput
        );
    }

    #[test]
    fn request_body_shape() {
        let msgs = crate::prompt::assemble(
            None,
            &crate::model::AccessRequest::without_scenario(
                "t",
                crate::model::AppProfile::new("A", "c", "d").unwrap(),
                crate::model::Permission::Camera,
            ),
            &[],
            None,
        );
        let body = RemoteBackend::request_body(&msgs, &ModelConfig::generic("gpt-4o"));
        assert_eq!(body["model"], "gpt-4o");
        assert_eq!(body["temperature"], 0.0);
        assert_eq!(body["logprobs"], true);
        assert_eq!(body["messages"][0]["role"], "system");
        assert_eq!(body["messages"][1]["role"], "user");
    }
}
