//! Corpus loading, validation, and the bundled study fixture.
//!
//! One JSONL file per record kind (see [`crate::jsonl`]). Tasks reference
//! apps by name; decisions and feedback reference tasks and users by id.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::FeedbackRecord;
use crate::jsonl::{self, JsonlError};
use crate::metrics::DecisionRecord;
use crate::model::{
    AccessRequest, AppProfile, BinaryDecision, LlmDecision, ModelError, Permission,
    PrivacyStatement, TaskId, TaskType, UserDecision, UserId,
};

pub const APPS_SCHEMA: &str = "permgate.apps";
pub const TASKS_SCHEMA: &str = "permgate.tasks";
pub const DECISIONS_SCHEMA: &str = "permgate.decisions";
pub const STATEMENTS_SCHEMA: &str = "permgate.statements";
pub const FEEDBACK_SCHEMA: &str = "permgate.feedback";
pub const SCENARIO_TABLE_SCHEMA: &str = "permgate.scenario_table";
pub const STUDY_SUMMARY_SCHEMA: &str = "permgate.study_summary";
pub const FEEDBACK_COUNTS_SCHEMA: &str = "permgate.feedback_counts";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error("{context}: {source}")]
    Model {
        context: String,
        #[source]
        source: ModelError,
    },
    #[error("duplicate app name `{0}`")]
    DuplicateApp(String),
    #[error("duplicate task id `{0}`")]
    DuplicateTask(String),
    #[error("dangling references: {}", .0.join("; "))]
    Dangling(Vec<String>),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

fn model_err(context: impl Into<String>) -> impl FnOnce(ModelError) -> DatasetError {
    let context = context.into();
    move |source| DatasetError::Model { context, source }
}

/// On-disk task row; the app is referenced by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskRow {
    pub id: TaskId,
    pub app: String,
    pub permission: Permission,
    pub task_type: TaskType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub screenshot_description: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expert_recommendation: Option<BinaryDecision>,
}

impl From<&AccessRequest> for TaskRow {
    fn from(r: &AccessRequest) -> Self {
        Self {
            id: r.id.clone(),
            app: r.app.name.clone(),
            permission: r.permission,
            task_type: r.task_type,
            scenario_text: r.scenario_text.clone(),
            screenshot_description: r.screenshot_description.clone(),
            expert_recommendation: r.expert_recommendation,
        }
    }
}

fn app_index(apps: &[AppProfile]) -> Result<BTreeMap<&str, &AppProfile>> {
    let mut index = BTreeMap::new();
    for app in apps {
        if app.name.trim().is_empty() {
            return Err(DatasetError::Model {
                context: "apps".into(),
                source: ModelError::Empty("app name"),
            });
        }
        if index.insert(app.name.as_str(), app).is_some() {
            return Err(DatasetError::DuplicateApp(app.name.clone()));
        }
    }
    Ok(index)
}

/// Joins task rows with their apps and validates each request.
pub fn resolve_tasks(apps: &[AppProfile], rows: Vec<TaskRow>) -> Result<Vec<AccessRequest>> {
    let index = app_index(apps)?;
    let mut missing = Vec::new();
    let mut tasks = Vec::with_capacity(rows.len());
    for row in rows {
        let Some(app) = index.get(row.app.as_str()) else {
            missing.push(format!(
                "task `{}` references unknown app `{}`",
                row.id, row.app
            ));
            continue;
        };
        let request = AccessRequest {
            id: row.id,
            app: (*app).clone(),
            permission: row.permission,
            scenario_text: row.scenario_text,
            screenshot_description: row.screenshot_description,
            task_type: row.task_type,
            expert_recommendation: row.expert_recommendation,
        };
        request
            .validate()
            .map_err(model_err(format!("task `{}`", request.id)))?;
        tasks.push(request);
    }
    if !missing.is_empty() {
        return Err(DatasetError::Dangling(missing));
    }
    Ok(tasks)
}

/// Cartesian product of apps and permissions as context-free tasks.
pub fn build_no_scenario_grid(
    apps: &[AppProfile],
    permissions: &[Permission],
) -> Result<Vec<AccessRequest>> {
    if apps.is_empty() {
        return Err(DatasetError::Invalid("app list is empty".into()));
    }
    app_index(apps)?;
    Ok(apps
        .iter()
        .flat_map(|app| {
            permissions.iter().map(move |p| {
                AccessRequest::without_scenario(
                    format!("ns-{}-{}", app.name.to_lowercase(), p.wire_name()),
                    app.clone(),
                    *p,
                )
            })
        })
        .collect())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub apps: Vec<AppProfile>,
    pub tasks: Vec<AccessRequest>,
    pub decisions: Vec<DecisionRecord>,
    pub statements: Vec<PrivacyStatement>,
    pub feedback: Vec<FeedbackRecord>,
}

impl Corpus {
    /// Unique task ids, known references, consistent task types.
    pub fn validate(&self) -> Result<()> {
        app_index(&self.apps)?;
        let mut ids = HashSet::new();
        for t in &self.tasks {
            if !ids.insert(&t.id) {
                return Err(DatasetError::DuplicateTask(t.id.to_string()));
            }
            t.validate()
                .map_err(model_err(format!("task `{}`", t.id)))?;
        }
        let mut users: BTreeSet<&UserId> = self.statements.iter().map(|s| &s.user_id).collect();
        if users.len() != self.statements.len() {
            return Err(DatasetError::Invalid(
                "more than one statement for a user".into(),
            ));
        }
        let check_users = !self.statements.is_empty();
        let mut dangling = Vec::new();
        for (i, d) in self.decisions.iter().enumerate() {
            match self.task(&d.task_id) {
                None => dangling.push(format!(
                    "decision {} references unknown task `{}`",
                    i + 1,
                    d.task_id
                )),
                Some(t) if t.task_type != d.task_type => dangling.push(format!(
                    "decision {} has task type {:?} but task `{}` is {:?}",
                    i + 1,
                    d.task_type,
                    d.task_id,
                    t.task_type
                )),
                Some(_) => {}
            }
            if check_users && !users.contains(&d.user_id) {
                dangling.push(format!(
                    "decision {} references unknown user `{}`",
                    i + 1,
                    d.user_id
                ));
            }
        }
        users.extend(self.decisions.iter().map(|d| &d.user_id));
        for (i, f) in self.feedback.iter().enumerate() {
            if self.task(&f.task_id).is_none() {
                dangling.push(format!(
                    "feedback {} references unknown task `{}`",
                    i + 1,
                    f.task_id
                ));
            }
            if !users.contains(&f.user_id) {
                dangling.push(format!(
                    "feedback {} references unknown user `{}`",
                    i + 1,
                    f.user_id
                ));
            }
        }
        if !dangling.is_empty() {
            return Err(DatasetError::Dangling(dangling));
        }
        Ok(())
    }

    pub fn task(&self, id: &TaskId) -> Option<&AccessRequest> {
        self.tasks.iter().find(|t| &t.id == id)
    }

    pub fn tasks_of_type(&self, task_type: TaskType) -> impl Iterator<Item = &AccessRequest> {
        self.tasks.iter().filter(move |t| t.task_type == task_type)
    }

    pub fn statement(&self, user: &UserId) -> Option<&PrivacyStatement> {
        self.statements.iter().find(|s| &s.user_id == user)
    }
}

/// File locations for [`load_corpus`]. Optional kinds may be absent.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CorpusPaths {
    pub apps: PathBuf,
    pub tasks: Vec<PathBuf>,
    pub decisions: Option<PathBuf>,
    pub statements: Option<PathBuf>,
    pub feedback: Option<PathBuf>,
}

impl CorpusPaths {
    /// Conventional layout: `apps.jsonl`, `tasks.jsonl` (or the bundled
    /// `scenario_tasks.jsonl`), and optional `decisions.jsonl`,
    /// `statements.jsonl`, `feedback.jsonl`.
    pub fn in_dir(dir: &Path) -> Self {
        let optional = |name: &str| Some(dir.join(name)).filter(|p| p.exists());
        let tasks = ["tasks.jsonl", "scenario_tasks.jsonl"]
            .iter()
            .map(|n| dir.join(n))
            .filter(|p| p.exists())
            .collect();
        Self {
            apps: dir.join("apps.jsonl"),
            tasks,
            decisions: optional("decisions.jsonl"),
            statements: optional("statements.jsonl"),
            feedback: optional("feedback.jsonl"),
        }
    }
}

fn read_opt<T: serde::de::DeserializeOwned>(
    path: &Option<PathBuf>,
    schema: &str,
) -> Result<Vec<T>> {
    Ok(match path {
        Some(p) => jsonl::read(p, schema)?,
        None => Vec::new(),
    })
}

/// Loads and validates a corpus.
pub fn load_corpus(paths: &CorpusPaths) -> Result<Corpus> {
    let apps: Vec<AppProfile> = jsonl::read(&paths.apps, APPS_SCHEMA)?;
    let mut rows = Vec::new();
    for p in &paths.tasks {
        rows.extend(jsonl::read::<TaskRow>(p, TASKS_SCHEMA)?);
    }
    let tasks = resolve_tasks(&apps, rows)?;
    let decisions: Vec<DecisionRecord> = read_opt(&paths.decisions, DECISIONS_SCHEMA)?;
    for (i, d) in decisions.iter().enumerate() {
        d.model
            .validate()
            .map_err(model_err(format!("decision {}", i + 1)))?;
    }
    let statements: Vec<PrivacyStatement> = read_opt(&paths.statements, STATEMENTS_SCHEMA)?;
    for s in &statements {
        s.validate()
            .map_err(model_err(format!("statement of `{}`", s.user_id)))?;
    }
    let feedback: Vec<FeedbackRecord> = read_opt(&paths.feedback, FEEDBACK_SCHEMA)?;
    for (i, f) in feedback.iter().enumerate() {
        f.validate()
            .map_err(|e| DatasetError::Invalid(format!("feedback {}: {e}", i + 1)))?;
    }
    let corpus = Corpus {
        apps,
        tasks,
        decisions,
        statements,
        feedback,
    };
    corpus.validate()?;
    Ok(corpus)
}

/// Writes a corpus in the layout read by [`CorpusPaths::in_dir`].
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    jsonl::write(&dir.join("apps.jsonl"), APPS_SCHEMA, &corpus.apps)?;
    let rows: Vec<TaskRow> = corpus.tasks.iter().map(TaskRow::from).collect();
    jsonl::write(&dir.join("tasks.jsonl"), TASKS_SCHEMA, &rows)?;
    jsonl::write(
        &dir.join("decisions.jsonl"),
        DECISIONS_SCHEMA,
        &corpus.decisions,
    )?;
    jsonl::write(
        &dir.join("statements.jsonl"),
        STATEMENTS_SCHEMA,
        &corpus.statements,
    )?;
    jsonl::write(
        &dir.join("feedback.jsonl"),
        FEEDBACK_SCHEMA,
        &corpus.feedback,
    )?;
    Ok(())
}

/// Published per-model aggregates for one scenario task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelAggregate {
    pub model_id: String,
    pub generic_decision: LlmDecision,
    pub personalized_deny_pct: u8,
    pub personalized_agreement_pct: u8,
}

/// Published aggregates for one scenario task (no per-user rows exist).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioAggregate {
    pub task_id: TaskId,
    pub n: u32,
    pub majority: BinaryDecision,
    pub deny_pct: u8,
    pub models: Vec<ModelAggregate>,
}

impl ScenarioAggregate {
    pub fn model(&self, model_id: &str) -> Option<&ModelAggregate> {
        self.models.iter().find(|m| m.model_id == model_id)
    }
}

/// User-side totals per task type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudySummaryRow {
    pub task_type: TaskType,
    pub tasks: u32,
    pub decisions: u32,
    pub deny_pct: u8,
}

/// Response counts for one feedback category, optionally narrowed to an
/// initial user decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackCount {
    pub category: crate::metrics::FeedbackCategory,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_decision: Option<UserDecision>,
    pub total: u32,
    pub yes: u32,
    pub no: u32,
    pub not_sure: u32,
}

/// The fixture shipped with the crate.
pub mod bundled {
    use super::*;
    use crate::backend::{ScriptEntry, SCRIPT_SCHEMA};

    pub const FIXTURE_DIR: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures");

    const APPS: &str = include_str!("../fixtures/apps.jsonl");
    const SCENARIO_TASKS: &str = include_str!("../fixtures/scenario_tasks.jsonl");
    const SCENARIO_TABLE: &str = include_str!("../fixtures/scenario_table.jsonl");
    const GENERIC_SCRIPTS: &str = include_str!("../fixtures/generic_scripts.jsonl");
    const STUDY_SUMMARY: &str = include_str!("../fixtures/study_summary.jsonl");
    const FEEDBACK_COUNTS: &str = include_str!("../fixtures/feedback_counts.jsonl");

    fn parse<T: serde::de::DeserializeOwned>(name: &str, schema: &str, text: &str) -> Vec<T> {
        jsonl::parse_str(Path::new(name), schema, text)
            .unwrap_or_else(|e| panic!("bundled fixture is invalid: {e}"))
    }

    pub fn apps() -> Vec<AppProfile> {
        parse("apps.jsonl", APPS_SCHEMA, APPS)
    }

    pub fn scenario_tasks() -> Vec<AccessRequest> {
        resolve_tasks(
            &apps(),
            parse("scenario_tasks.jsonl", TASKS_SCHEMA, SCENARIO_TASKS),
        )
        .expect("bundled tasks resolve")
    }

    pub fn no_scenario_tasks() -> Vec<AccessRequest> {
        build_no_scenario_grid(&apps(), &Permission::ALL).expect("bundled apps are unique")
    }

    /// All 111 tasks, no decisions.
    pub fn corpus() -> Corpus {
        let mut tasks = scenario_tasks();
        tasks.extend(no_scenario_tasks());
        Corpus {
            apps: apps(),
            tasks,
            ..Corpus::default()
        }
    }

    pub fn scenario_table() -> Vec<ScenarioAggregate> {
        parse(
            "scenario_table.jsonl",
            SCENARIO_TABLE_SCHEMA,
            SCENARIO_TABLE,
        )
    }

    /// Recorded generic decisions (no log-probabilities) for the scenario tasks.
    pub fn generic_scripts() -> Vec<ScriptEntry> {
        parse("generic_scripts.jsonl", SCRIPT_SCHEMA, GENERIC_SCRIPTS)
    }

    pub fn study_summary() -> Vec<StudySummaryRow> {
        parse("study_summary.jsonl", STUDY_SUMMARY_SCHEMA, STUDY_SUMMARY)
    }

    pub fn feedback_counts() -> Vec<FeedbackCount> {
        parse(
            "feedback_counts.jsonl",
            FEEDBACK_COUNTS_SCHEMA,
            FEEDBACK_COUNTS,
        )
    }
}

/// Deterministic per-user records generated from published aggregates.
/// Every generated user id starts with [`SYNTHETIC_PREFIX`].
pub mod synthetic {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::engine::{FeedbackReason, FeedbackResponse};
    use crate::metrics::FeedbackCategory;
    use crate::model::{ModelConfig, Verdict};

    pub const SYNTHETIC_PREFIX: &str = "synthetic-";
    pub const DEFAULT_SEED: u64 = 0x5ca1_ab1e;
    /// Large enough for the biggest scenario task.
    pub const DEFAULT_USER_POOL: usize = 300;

    fn user(kind: &str, i: usize) -> UserId {
        UserId::new(format!("{SYNTHETIC_PREFIX}{kind}-{i:04}"))
    }

    fn count(n: u32, pct: u8) -> usize {
        (f64::from(n) * f64::from(pct) / 100.0).round() as usize
    }

    /// Per-user decisions for every aggregate row, one record per
    /// (user, task, model). Generic models repeat the published decision;
    /// personalized models realize the published deny and agreement rates
    /// as closely as integer counts allow.
    pub fn expand_scenario_table(
        table: &[ScenarioAggregate],
        tasks: &[AccessRequest],
        models: &[ModelConfig],
        seed: u64,
        user_pool: usize,
    ) -> Result<Vec<DecisionRecord>> {
        let mut out = Vec::new();
        for (idx, row) in table.iter().enumerate() {
            let task = tasks.iter().find(|t| t.id == row.task_id).ok_or_else(|| {
                DatasetError::Dangling(vec![format!(
                    "aggregate for unknown task `{}`",
                    row.task_id
                )])
            })?;
            let n = row.n as usize;
            if n > user_pool {
                return Err(DatasetError::Invalid(format!(
                    "task `{}` needs {n} users but the pool has {user_pool}",
                    row.task_id
                )));
            }
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed ^ (idx as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let mut users: Vec<usize> = (0..user_pool).collect();
            users.shuffle(&mut rng);
            users.truncate(n);
            let user_deny = count(row.n, row.deny_pct);
            // the first `user_deny` sampled users deny
            let user_decision = |k: usize| {
                if k < user_deny {
                    UserDecision::Deny
                } else {
                    UserDecision::Allow
                }
            };
            for model in models {
                let agg = row.model(&model.model_id).ok_or_else(|| {
                    DatasetError::Invalid(format!(
                        "no aggregates for model `{}` on `{}`",
                        model.model_id, row.task_id
                    ))
                })?;
                let llm_deny: Vec<bool> = if model.personalized {
                    let p = count(row.n, agg.personalized_deny_pct);
                    let a = count(row.n, agg.personalized_agreement_pct) as i64;
                    let (d, p_i, n_i) = (user_deny as i64, p as i64, n as i64);
                    let lo = (d + p_i - n_i).max(0);
                    let hi = d.min(p_i);
                    let both = ((a - n_i + d + p_i) as f64 / 2.0).round() as i64;
                    let both = both.clamp(lo, hi) as usize;
                    (0..n)
                        .map(|k| {
                            if k < user_deny {
                                k < both
                            } else {
                                k - user_deny < p - both
                            }
                        })
                        .collect()
                } else {
                    vec![agg.generic_decision == LlmDecision::Deny; n]
                };
                for (k, &u) in users.iter().enumerate() {
                    let llm = match (model.personalized, llm_deny[k]) {
                        (_, true) => LlmDecision::Deny,
                        (false, false) => agg.generic_decision,
                        (true, false) => LlmDecision::Allow,
                    };
                    out.push(DecisionRecord {
                        user_id: user("u", u),
                        task_id: row.task_id.clone(),
                        task_type: task.task_type,
                        user_decision: user_decision(k),
                        llm_decision: Some(llm),
                        confidence: None,
                        model: model.clone(),
                    });
                }
            }
        }
        Ok(out)
    }

    /// Feedback items (and the initial decisions they refer to) matching
    /// the published per-category response counts. Rows narrowed to an
    /// initial decision replace the plain row of their category and must
    /// add up to it.
    #[derive(Debug, Clone, PartialEq)]
    pub struct FeedbackExpansion {
        pub feedback: Vec<FeedbackRecord>,
        pub initial: Vec<DecisionRecord>,
    }

    pub fn expand_feedback(
        counts: &[FeedbackCount],
        tasks: &[AccessRequest],
        model: &ModelConfig,
        seed: u64,
    ) -> Result<FeedbackExpansion> {
        let scenario: Vec<&AccessRequest> = tasks
            .iter()
            .filter(|t| t.task_type.has_scenario())
            .collect();
        let once_capable: Vec<&AccessRequest> = scenario
            .iter()
            .copied()
            .filter(|t| t.offers_once())
            .collect();
        if scenario.len() < 8 || once_capable.len() < 8 {
            return Err(DatasetError::Invalid(
                "need at least 8 scenario and 8 once-capable tasks".into(),
            ));
        }
        let mut groups: Vec<&FeedbackCount> = Vec::new();
        for category in FeedbackCategory::ALL {
            let plain: Vec<_> = counts
                .iter()
                .filter(|c| c.category == category && c.initial_decision.is_none())
                .collect();
            let split: Vec<_> = counts
                .iter()
                .filter(|c| c.category == category && c.initial_decision.is_some())
                .collect();
            if split.is_empty() {
                groups.extend(plain);
                continue;
            }
            for p in &plain {
                let sum = |f: fn(&FeedbackCount) -> u32| split.iter().map(|c| f(c)).sum::<u32>();
                if (sum(|c| c.yes), sum(|c| c.no), sum(|c| c.not_sure)) != (p.yes, p.no, p.not_sure)
                {
                    return Err(DatasetError::Invalid(format!(
                        "split rows for {category:?} do not add up"
                    )));
                }
            }
            groups.extend(split);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut feedback = Vec::new();
        let mut initial = Vec::new();
        let mut used: HashSet<(usize, TaskId)> = HashSet::new();
        let mut item = 0usize;
        let mut cursor = [0usize; 2];
        for g in groups {
            if g.yes + g.no + g.not_sure != g.total {
                return Err(DatasetError::Invalid(format!(
                    "counts for {:?} do not sum to total",
                    g.category
                )));
            }
            let mut responses: Vec<FeedbackResponse> = [
                (FeedbackResponse::Yes, g.yes),
                (FeedbackResponse::No, g.no),
                (FeedbackResponse::NotSure, g.not_sure),
            ]
            .iter()
            .flat_map(|(r, k)| std::iter::repeat_n(*r, *k as usize))
            .collect();
            responses.shuffle(&mut rng);
            for (i, response) in responses.into_iter().enumerate() {
                let alt = i % 2 == 0;
                let (user_decision, shown) = match (g.category, g.initial_decision) {
                    (FeedbackCategory::Agreed, _) if alt => {
                        (UserDecision::Allow, LlmDecision::Allow)
                    }
                    (FeedbackCategory::Agreed, _) => (UserDecision::Deny, LlmDecision::Deny),
                    (FeedbackCategory::Disagreed, Some(UserDecision::Deny)) => {
                        (UserDecision::Deny, LlmDecision::Allow)
                    }
                    (FeedbackCategory::Disagreed, Some(d)) => (d, LlmDecision::Deny),
                    (FeedbackCategory::Disagreed, None) if alt => {
                        (UserDecision::Allow, LlmDecision::Deny)
                    }
                    (FeedbackCategory::Disagreed, None) => (UserDecision::Deny, LlmDecision::Allow),
                    (FeedbackCategory::AllowVsOnce, _) if alt => {
                        (UserDecision::Allow, LlmDecision::Once)
                    }
                    (FeedbackCategory::AllowVsOnce, _) => (UserDecision::Once, LlmDecision::Allow),
                    (FeedbackCategory::NotDecided, _) if alt => {
                        (UserDecision::NotSure, LlmDecision::Deny)
                    }
                    (FeedbackCategory::NotDecided, _) => {
                        (UserDecision::WouldNever, LlmDecision::Allow)
                    }
                };
                let needs_once = user_decision == UserDecision::Once || shown == LlmDecision::Once;
                let (pool, c) = if needs_once {
                    (&once_capable, 1)
                } else {
                    (&scenario, 0)
                };
                let user_idx = item / 8;
                let task = loop {
                    let t = pool[cursor[c] % pool.len()];
                    cursor[c] += 1;
                    if used.insert((user_idx, t.id.clone())) {
                        break t;
                    }
                };
                let uid = user("fb", user_idx);
                let reasons = match response {
                    FeedbackResponse::NotSure => BTreeSet::new(),
                    _ => BTreeSet::from([[
                        FeedbackReason::Personal,
                        FeedbackReason::App,
                        FeedbackReason::Details,
                    ][i % 3]]),
                };
                feedback.push(FeedbackRecord {
                    user_id: uid.clone(),
                    task_id: task.id.clone(),
                    shown_verdict: Verdict::new(shown, "Synthetic verdict.", None)
                        .expect("non-empty"),
                    response,
                    reasons,
                    free_text: None,
                });
                initial.push(DecisionRecord {
                    user_id: uid,
                    task_id: task.id.clone(),
                    task_type: task.task_type,
                    user_decision,
                    llm_decision: Some(shown),
                    confidence: None,
                    model: model.clone(),
                });
                item += 1;
            }
        }
        Ok(FeedbackExpansion { feedback, initial })
    }

    /// The bundled tasks plus synthetic scenario decisions for the given models.
    pub fn bundled_corpus(models: &[ModelConfig], seed: u64) -> Result<Corpus> {
        let mut corpus = bundled::corpus();
        corpus.decisions = expand_scenario_table(
            &bundled::scenario_table(),
            &corpus.tasks,
            models,
            seed,
            DEFAULT_USER_POOL,
        )?;
        corpus.validate()?;
        Ok(corpus)
    }

    /// The bundled tasks plus synthetic feedback and the initial decisions
    /// it refers to. Kept apart from [`bundled_corpus`] so the feedback
    /// users do not shift task majorities.
    pub fn feedback_corpus(model: &ModelConfig, seed: u64) -> Result<Corpus> {
        let mut corpus = bundled::corpus();
        let fb = expand_feedback(&bundled::feedback_counts(), &corpus.tasks, model, seed)?;
        corpus.decisions = fb.initial;
        corpus.feedback = fb.feedback;
        corpus.validate()?;
        Ok(corpus)
    }
}
