//! Domain types shared by every layer: permissions, requests, the decision
//! vocabularies and the binarization rule used throughout the analysis.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Validation failures for domain values.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("unknown {kind} `{value}`")]
    UnknownVariant { kind: &'static str, value: String },
    #[error("{0} must not be empty")]
    Empty(&'static str),
    #[error("probability {0} is outside [0, 1]")]
    ProbabilityOutOfRange(f64),
    #[error("temperature {0} must be non-negative")]
    NegativeTemperature(f64),
    #[error("request `{id}`: {reason}")]
    InvalidRequest { id: String, reason: String },
    #[error("decision `once` is not offered for {permission} on task `{task}`")]
    OnceNotOffered {
        task: String,
        permission: Permission,
    },
}

macro_rules! id_newtype {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(value: impl Into<String>) -> Self {
                Self(value.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(value: &str) -> Self {
                Self(value.to_owned())
            }
        }

        impl From<String> for $name {
            fn from(value: String) -> Self {
                Self(value)
            }
        }
    };
}

id_newtype!(
    /// Identifier of a task (one app/permission/scenario combination).
    TaskId
);
id_newtype!(
    /// Opaque, pre-anonymized participant identifier.
    UserId
);

/// The six runtime permissions covered by the corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Permission {
    Calendar,
    Camera,
    Contacts,
    Location,
    Microphone,
    Photos,
}

impl Permission {
    pub const ALL: [Permission; 6] = [
        Permission::Calendar,
        Permission::Camera,
        Permission::Contacts,
        Permission::Location,
        Permission::Microphone,
        Permission::Photos,
    ];

    /// Permissions for which the platform offers a one-time grant.
    pub fn offers_once(self) -> bool {
        matches!(
            self,
            Permission::Camera | Permission::Location | Permission::Microphone
        )
    }

    pub fn wire_name(self) -> &'static str {
        match self {
            Permission::Calendar => "calendar",
            Permission::Camera => "camera",
            Permission::Contacts => "contacts",
            Permission::Location => "location",
            Permission::Microphone => "microphone",
            Permission::Photos => "photos",
        }
    }
}

impl fmt::Display for Permission {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Permission::Calendar => "Calendar",
            Permission::Camera => "Camera",
            Permission::Contacts => "Contacts",
            Permission::Location => "Location",
            Permission::Microphone => "Microphone",
            Permission::Photos => "Photos",
        };
        f.write_str(name)
    }
}

impl FromStr for Permission {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Permission::ALL
            .into_iter()
            .find(|p| p.wire_name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| ModelError::UnknownVariant {
                kind: "permission",
                value: s.to_owned(),
            })
    }
}

/// An app as presented to both participants and the decision model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppProfile {
    pub name: String,
    pub category: String,
    pub description: String,
}

impl AppProfile {
    pub fn new(
        name: impl Into<String>,
        category: impl Into<String>,
        description: impl Into<String>,
    ) -> Result<Self, ModelError> {
        let name = name.into();
        if name.trim().is_empty() {
            return Err(ModelError::Empty("app name"));
        }
        Ok(Self {
            name,
            category: category.into(),
            description: description.into(),
        })
    }
}

/// Task taxonomy. Essential and sensitive tasks carry an expert recommendation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskType {
    NoScenario,
    Discretionary,
    Essential,
    Sensitive,
}

impl TaskType {
    pub const ALL: [TaskType; 4] = [
        TaskType::NoScenario,
        TaskType::Discretionary,
        TaskType::Essential,
        TaskType::Sensitive,
    ];

    /// The expert recommendation implied by the task type, if any.
    pub fn expert_recommendation(self) -> Option<BinaryDecision> {
        match self {
            TaskType::Essential => Some(BinaryDecision::Allow),
            TaskType::Sensitive => Some(BinaryDecision::Deny),
            TaskType::NoScenario | TaskType::Discretionary => None,
        }
    }

    pub fn has_scenario(self) -> bool {
        self != TaskType::NoScenario
    }

    pub fn label(self) -> &'static str {
        match self {
            TaskType::NoScenario => "No Scenario",
            TaskType::Discretionary => "Discretionary",
            TaskType::Essential => "Essential",
            TaskType::Sensitive => "Sensitive",
        }
    }
}

/// A single permission request to be mediated.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccessRequest {
    pub id: TaskId,
    pub app: AppProfile,
    pub permission: Permission,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub screenshot_description: Option<String>,
    pub task_type: TaskType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expert_recommendation: Option<BinaryDecision>,
}

impl AccessRequest {
    /// A request without usage context.
    pub fn without_scenario(
        id: impl Into<TaskId>,
        app: AppProfile,
        permission: Permission,
    ) -> Self {
        Self {
            id: id.into(),
            app,
            permission,
            scenario_text: None,
            screenshot_description: None,
            task_type: TaskType::NoScenario,
            expert_recommendation: None,
        }
    }

    /// A scenario request; the expert recommendation follows from `task_type`.
    pub fn with_scenario(
        id: impl Into<TaskId>,
        app: AppProfile,
        permission: Permission,
        task_type: TaskType,
        scenario: impl Into<String>,
    ) -> Result<Self, ModelError> {
        let request = Self {
            id: id.into(),
            app,
            permission,
            scenario_text: Some(scenario.into()),
            screenshot_description: None,
            task_type,
            expert_recommendation: task_type.expert_recommendation(),
        };
        request.validate()?;
        Ok(request)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |reason: &str| ModelError::InvalidRequest {
            id: self.id.to_string(),
            reason: reason.to_owned(),
        };
        if self.id.as_str().trim().is_empty() {
            return Err(ModelError::Empty("request id"));
        }
        if self.app.name.trim().is_empty() {
            return Err(ModelError::Empty("app name"));
        }
        let has_text = self
            .scenario_text
            .as_deref()
            .is_some_and(|s| !s.trim().is_empty());
        if has_text != self.task_type.has_scenario() {
            return Err(fail(
                "scenario text must be present exactly for scenario tasks",
            ));
        }
        if !has_text && self.screenshot_description.is_some() {
            return Err(fail("screenshot description requires a scenario"));
        }
        if self.expert_recommendation != self.task_type.expert_recommendation() {
            return Err(fail("expert recommendation does not match the task type"));
        }
        Ok(())
    }

    /// Whether a participant could answer `once` on this task.
    pub fn offers_once(&self) -> bool {
        self.task_type.has_scenario() && self.permission.offers_once()
    }

    /// Checks that `decision` was a valid answer option for this request.
    pub fn check_user_decision(&self, decision: UserDecision) -> Result<(), ModelError> {
        if decision == UserDecision::Once && !self.offers_once() {
            return Err(ModelError::OnceNotOffered {
                task: self.id.to_string(),
                permission: self.permission,
            });
        }
        Ok(())
    }
}

/// A participant's answer to a task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UserDecision {
    Allow,
    Once,
    Deny,
    NotSure,
    WouldNever,
}

/// The closed output vocabulary of the decision model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LlmDecision {
    Allow,
    Once,
    Deny,
}

impl LlmDecision {
    pub fn token(self) -> &'static str {
        match self {
            LlmDecision::Allow => "allow",
            LlmDecision::Once => "once",
            LlmDecision::Deny => "deny",
        }
    }

    /// Parses a decision token after trimming quotes/whitespace and lowercasing.
    pub fn from_token(token: &str) -> Option<Self> {
        let normalized = normalize_token(token);
        match normalized.as_str() {
            "allow" => Some(LlmDecision::Allow),
            "once" => Some(LlmDecision::Once),
            "deny" => Some(LlmDecision::Deny),
            _ => None,
        }
    }
}

/// Lowercases and strips whitespace and quoting around a decision token.
pub fn normalize_token(token: &str) -> String {
    token
        .trim()
        .trim_matches(|c: char| c == '"' || c == '\'' || c == '`' || c.is_whitespace())
        .to_ascii_lowercase()
}

impl fmt::Display for LlmDecision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl fmt::Display for UserDecision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            UserDecision::Allow => "allow",
            UserDecision::Once => "once",
            UserDecision::Deny => "deny",
            UserDecision::NotSure => "not_sure",
            UserDecision::WouldNever => "would_never",
        };
        f.write_str(s)
    }
}

impl From<LlmDecision> for UserDecision {
    fn from(value: LlmDecision) -> Self {
        match value {
            LlmDecision::Allow => UserDecision::Allow,
            LlmDecision::Once => UserDecision::Once,
            LlmDecision::Deny => UserDecision::Deny,
        }
    }
}

/// Grant-or-refuse, the class space of every metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinaryDecision {
    Allow,
    Deny,
}

impl fmt::Display for BinaryDecision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BinaryDecision::Allow => "allow",
            BinaryDecision::Deny => "deny",
        })
    }
}

/// Collapses a decision to the binary class space. `once` counts as allow;
/// `not sure` and `would never` are excluded from analysis.
pub trait Binarize {
    fn binarize(&self) -> Option<BinaryDecision>;
}

impl Binarize for UserDecision {
    fn binarize(&self) -> Option<BinaryDecision> {
        match self {
            UserDecision::Allow | UserDecision::Once => Some(BinaryDecision::Allow),
            UserDecision::Deny => Some(BinaryDecision::Deny),
            UserDecision::NotSure | UserDecision::WouldNever => None,
        }
    }
}

impl Binarize for LlmDecision {
    fn binarize(&self) -> Option<BinaryDecision> {
        Some(match self {
            LlmDecision::Allow | LlmDecision::Once => BinaryDecision::Allow,
            LlmDecision::Deny => BinaryDecision::Deny,
        })
    }
}

impl<T: Binarize> Binarize for Option<T> {
    fn binarize(&self) -> Option<BinaryDecision> {
        self.as_ref().and_then(Binarize::binarize)
    }
}

/// Which question set guided the participant's statement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionFocus {
    HighLevel,
    PhoneFocused,
}

/// How the statement was collected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    Form,
    Chat,
}

/// A user's natural-language description of their access-control preferences.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacyStatement {
    pub user_id: UserId,
    pub text: String,
    pub question_focus: QuestionFocus,
    pub input_mode: InputMode,
}

impl PrivacyStatement {
    pub fn new(
        user_id: impl Into<UserId>,
        text: impl Into<String>,
        question_focus: QuestionFocus,
        input_mode: InputMode,
    ) -> Result<Self, ModelError> {
        let statement = Self {
            user_id: user_id.into(),
            text: text.into(),
            question_focus,
            input_mode,
        };
        statement.validate()?;
        Ok(statement)
    }

    /// Builds a statement from question/answer pairs, each answer preceded by
    /// its question as a header line.
    pub fn from_answers<'a>(
        user_id: impl Into<UserId>,
        answers: impl IntoIterator<Item = (&'a str, &'a str)>,
        question_focus: QuestionFocus,
        input_mode: InputMode,
    ) -> Result<Self, ModelError> {
        let text = answers
            .into_iter()
            .map(|(question, answer)| format!("{}\n{}", question.trim(), answer.trim()))
            .collect::<Vec<_>>()
            .join("\n\n");
        Self::new(user_id, text, question_focus, input_mode)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.text.trim().is_empty() {
            return Err(ModelError::Empty("privacy statement"));
        }
        Ok(())
    }

    /// Statement length in characters.
    pub fn char_len(&self) -> usize {
        self.text.chars().count()
    }
}

/// A probability in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Probability(f64);

impl Probability {
    pub const ONE: Probability = Probability(1.0);
    pub const ZERO: Probability = Probability(0.0);

    pub fn new(value: f64) -> Result<Self, ModelError> {
        if (0.0..=1.0).contains(&value) {
            Ok(Self(value))
        } else {
            Err(ModelError::ProbabilityOutOfRange(value))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Probability {
    type Error = ModelError;

    fn try_from(value: f64) -> Result<Self, Self::Error> {
        Probability::new(value)
    }
}

impl From<Probability> for f64 {
    fn from(value: Probability) -> Self {
        value.0
    }
}

/// The decision model's structured answer for one request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Verdict {
    pub decision: LlmDecision,
    pub justification: String,
    #[serde(default)]
    pub confidence: Option<Probability>,
}

impl Verdict {
    pub fn new(
        decision: LlmDecision,
        justification: impl Into<String>,
        confidence: Option<Probability>,
    ) -> Result<Self, ModelError> {
        let justification = justification.into();
        if justification.trim().is_empty() {
            return Err(ModelError::Empty("justification"));
        }
        Ok(Self {
            decision,
            justification,
            confidence,
        })
    }
}

/// Which model to run and how.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub model_id: String,
    /// Personalized models receive the user's privacy statement.
    pub personalized: bool,
    #[serde(default)]
    pub decoding_temperature: f64,
    #[serde(default = "default_true")]
    pub request_confidence: bool,
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    pub fn generic(model_id: impl Into<String>) -> Self {
        Self {
            model_id: model_id.into(),
            personalized: false,
            decoding_temperature: 0.0,
            request_confidence: true,
        }
    }

    pub fn personalized(model_id: impl Into<String>) -> Self {
        Self {
            personalized: true,
            ..Self::generic(model_id)
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.model_id.trim().is_empty() {
            return Err(ModelError::Empty("model id"));
        }
        if self.decoding_temperature.is_nan() || self.decoding_temperature < 0.0 {
            return Err(ModelError::NegativeTemperature(self.decoding_temperature));
        }
        Ok(())
    }

    /// Short label such as `G_gpt-4o` / `P_gpt-4o`.
    pub fn label(&self) -> String {
        let prefix = if self.personalized { "P" } else { "G" };
        format!("{prefix}_{}", self.model_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn app() -> AppProfile {
        AppProfile::new("FoodGuide", "Food & Drink", "Restaurant finder").unwrap()
    }

    #[test]
    fn binarize_user_values() {
        assert_eq!(UserDecision::Once.binarize(), Some(BinaryDecision::Allow));
        assert_eq!(UserDecision::Allow.binarize(), Some(BinaryDecision::Allow));
        assert_eq!(UserDecision::Deny.binarize(), Some(BinaryDecision::Deny));
        assert_eq!(UserDecision::NotSure.binarize(), None);
        assert_eq!(UserDecision::WouldNever.binarize(), None);
    }

    #[test]
    fn binarize_llm_values_is_total() {
        assert_eq!(LlmDecision::Once.binarize(), Some(BinaryDecision::Allow));
        assert_eq!(LlmDecision::Deny.binarize(), Some(BinaryDecision::Deny));
        assert_eq!(LlmDecision::Allow.binarize(), Some(BinaryDecision::Allow));
    }

    #[test]
    fn token_normalization() {
        assert_eq!(LlmDecision::from_token("Deny"), Some(LlmDecision::Deny));
        assert_eq!(
            LlmDecision::from_token(" \"ALLOW\" "),
            Some(LlmDecision::Allow)
        );
        assert_eq!(LlmDecision::from_token("maybe"), None);
    }

    #[test]
    fn request_invariants() {
        let ok = AccessRequest::with_scenario(
            "t1",
            app(),
            Permission::Location,
            TaskType::Essential,
            "searching for restaurants",
        )
        .unwrap();
        assert_eq!(ok.expert_recommendation, Some(BinaryDecision::Allow));

        let mut bad = ok.clone();
        bad.expert_recommendation = None;
        assert!(bad.validate().is_err());

        let mut bad = ok.clone();
        bad.scenario_text = None;
        assert!(bad.validate().is_err());

        let plain = AccessRequest::without_scenario("t2", app(), Permission::Camera);
        plain.validate().unwrap();
        assert!(!plain.offers_once());
        assert!(plain.check_user_decision(UserDecision::Once).is_err());
        assert!(ok.check_user_decision(UserDecision::Once).is_ok());
    }

    #[test]
    fn permission_parsing() {
        assert_eq!(
            "Location".parse::<Permission>().unwrap(),
            Permission::Location
        );
        assert!("gps".parse::<Permission>().is_err());
        let json = serde_json::to_string(&Permission::Microphone).unwrap();
        assert_eq!(json, "\"microphone\"");
    }

    #[test]
    fn probability_bounds() {
        assert!(Probability::new(1.0).is_ok());
        assert!(Probability::new(-0.01).is_err());
        assert!(Probability::new(f64::NAN).is_err());
        assert!(serde_json::from_str::<Probability>("1.5").is_err());
    }

    #[test]
    fn verdict_requires_justification() {
        assert!(Verdict::new(LlmDecision::Deny, "  ", None).is_err());
    }

    #[test]
    fn statement_length_and_answers() {
        let s = PrivacyStatement::from_answers(
            "u1",
            [("Q1?", "I share little."), ("Q2?", "Only when needed.")],
            QuestionFocus::HighLevel,
            InputMode::Form,
        )
        .unwrap();
        assert_eq!(s.text, "Q1?\nI share little.\n\nQ2?\nOnly when needed.");
        assert_eq!(s.char_len(), s.text.chars().count());
        assert!(
            PrivacyStatement::new("u1", "", QuestionFocus::HighLevel, InputMode::Chat).is_err()
        );
    }

    #[test]
    fn model_config_temperature() {
        let mut cfg = ModelConfig::generic("gpt-4o");
        assert_eq!(cfg.label(), "G_gpt-4o");
        cfg.decoding_temperature = -1.0;
        assert!(cfg.validate().is_err());
    }
}
