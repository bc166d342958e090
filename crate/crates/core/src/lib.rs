//! Permission-request mediation: a decision model predicts allow/deny for a
//! user's permission prompts from their privacy statement, and a threshold
//! policy decides whether to enforce the prediction or defer to the user.

pub mod audit;
pub mod backend;
pub mod dataset;
pub mod engine;
pub mod jsonl;
pub mod metrics;
pub mod model;
pub mod prompt;
pub mod report;

pub use backend::{DecisionBackend, ScriptedBackend};
pub use engine::{PolicyEngine, ThresholdConfig};
pub use model::{
    AccessRequest, LlmDecision, ModelConfig, Permission, TaskType, UserDecision, Verdict,
};
