//! Prompt protocol for the decision model.
//!
//! The template ships as `assets/system_prompt.txt`. Everything above the
//! `+++ Information about the permission request +++` marker becomes the
//! system message (with the user's statement, prior examples and general
//! feedback); the request block below the marker becomes the final user
//! message so the live request is always last.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AccessRequest, Binarize, PrivacyStatement, UserDecision};

/// The full template, byte-for-byte.
pub const PROMPT_TEMPLATE: &str = include_str!("../assets/system_prompt.txt");

const REQUEST_MARKER: &str = "+++ Information about the permission request +++";

/// Filled into `{conversation}` when no statement is available (generic models).
pub const NO_PREFERENCES_MARKER: &str = "(none provided)";

/// Filled into `{scenario}` for requests without usage context.
pub const NO_SCENARIO_SENTENCE: &str =
    "The user has not provided a usage context for this request.";

const EXAMPLES_HEADER: &str =
    "The following are decisions the user made on earlier permission requests:";
const FEEDBACK_HEADER: &str = "General feedback the user gave on earlier decisions:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptMessage {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("example for `{0}` has decision `{1}`, which is excluded from learning")]
    ExcludedDecision(String, UserDecision),
}

/// A resolved request used as an in-context example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleItem {
    pub request: AccessRequest,
    pub user_decision: UserDecision,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback_note: Option<String>,
}

impl ExampleItem {
    pub fn new(request: AccessRequest, user_decision: UserDecision) -> Result<Self, PromptError> {
        if user_decision.binarize().is_none() {
            return Err(PromptError::ExcludedDecision(
                request.id.to_string(),
                user_decision,
            ));
        }
        Ok(Self {
            request,
            user_decision,
            feedback_note: None,
        })
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.feedback_note = Some(note.into());
        self
    }
}

fn split_template() -> (&'static str, &'static str) {
    let at = PROMPT_TEMPLATE
        .find(REQUEST_MARKER)
        .expect("template contains the request marker");
    (&PROMPT_TEMPLATE[..at], &PROMPT_TEMPLATE[at..])
}

/// Single-pass placeholder substitution; substituted text is never rescanned.
fn fill(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open..];
        let hit = values.iter().find_map(|(key, value)| {
            let token_len = key.len() + 2;
            (tail.len() >= token_len
                && tail[1..].starts_with(key)
                && tail.as_bytes()[token_len - 1] == b'}')
                .then_some((token_len, *value))
        });
        match hit {
            Some((len, value)) => {
                out.push_str(value);
                rest = &tail[len..];
            }
            None => {
                out.push('{');
                rest = &tail[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

/// The system section of the template, up to and including the
/// `{conversation}` placeholder.
pub fn render_system_prompt() -> &'static str {
    split_template().0.trim_end()
}

fn scenario_line(request: &AccessRequest) -> String {
    match request.scenario_text.as_deref().map(str::trim) {
        Some(text) if !text.is_empty() => match request.screenshot_description.as_deref() {
            Some(shot) if !shot.trim().is_empty() => {
                format!("{text} Screenshot description: {}", shot.trim())
            }
            _ => text.to_owned(),
        },
        _ => NO_SCENARIO_SENTENCE.to_owned(),
    }
}

/// The request block with `{app}`, `{permission}` and `{scenario}` filled.
pub fn render_request_block(request: &AccessRequest) -> String {
    let scenario = scenario_line(request);
    let permission = request.permission.to_string();
    fill(
        split_template().1.trim_end(),
        &[
            ("app", request.app.name.as_str()),
            ("permission", permission.as_str()),
            ("scenario", scenario.as_str()),
        ],
    )
}

fn render_example(item: &ExampleItem) -> String {
    let mut out = format!(
        "Request: App: {}; Requested Permission: {}; Request Context: {}\nUser decision: {}",
        item.request.app.name,
        item.request.permission,
        scenario_line(&item.request),
        item.user_decision,
    );
    if let Some(note) = item
        .feedback_note
        .as_deref()
        .filter(|n| !n.trim().is_empty())
    {
        out.push_str("\nFeedback: ");
        out.push_str(note.trim());
    }
    out
}

/// Builds the message list for one request. Pure: identical inputs give
/// byte-identical output.
pub fn assemble(
    statement: Option<&PrivacyStatement>,
    request: &AccessRequest,
    examples: &[ExampleItem],
    general_feedback: Option<&str>,
) -> Vec<PromptMessage> {
    let conversation = statement
        .map(|s| s.text.trim())
        .filter(|t| !t.is_empty())
        .unwrap_or(NO_PREFERENCES_MARKER);
    let mut system = fill(render_system_prompt(), &[("conversation", conversation)]);

    if !examples.is_empty() {
        system.push_str("\n\n");
        system.push_str(EXAMPLES_HEADER);
        for item in examples {
            system.push_str("\n\n");
            system.push_str(&render_example(item));
        }
    }
    if let Some(feedback) = general_feedback.map(str::trim).filter(|f| !f.is_empty()) {
        system.push_str("\n\n");
        system.push_str(FEEDBACK_HEADER);
        system.push('\n');
        system.push_str(feedback);
    }

    vec![
        PromptMessage {
            role: Role::System,
            content: system,
        },
        PromptMessage {
            role: Role::User,
            content: render_request_block(request),
        },
    ]
}
