//! Tab-separated report tables with a fixed column order.
//!
//! Numbers are written with two decimals; missing values as `NA`.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::Corpus;
use crate::engine::FeedbackRecord;
use crate::metrics::{self, DecisionRecord, FeedbackCategory, Reference, SweepCell};
use crate::model::{Binarize, LlmDecision, Probability, TaskId, TaskType, UserDecision, UserId};

pub const NA: &str = "NA";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportTable {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl ReportTable {
    pub fn new(name: &str, columns: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Self {
            name: name.to_owned(),
            columns: columns.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(
            row.len(),
            self.columns.len(),
            "row width for `{}`",
            self.name
        );
        self.rows.push(row);
    }

    pub fn to_tsv(&self) -> String {
        let mut out = self.columns.join("\t");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join("\t"));
            out.push('\n');
        }
        out
    }

    /// Cell by row key (first column) and column name.
    pub fn cell(&self, key: &str, column: &str) -> Option<&str> {
        let c = self.columns.iter().position(|x| x == column)?;
        let row = self.rows.iter().find(|r| r[0] == key)?;
        Some(&row[c])
    }
}

pub fn fmt2(value: f64) -> String {
    format!("{value:.2}")
}

pub fn fmt_opt(value: Option<f64>) -> String {
    value.map_or_else(|| NA.to_owned(), fmt2)
}

/// Writes `<dir>/<name>.tsv` for each table.
pub fn export_report(tables: &[ReportTable], dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    tables
        .iter()
        .map(|t| {
            let path = dir.join(format!("{}.tsv", t.name));
            std::fs::write(&path, t.to_tsv())?;
            Ok(path)
        })
        .collect()
}

/// One generic model's per-task decisions.
#[derive(Debug, Clone, PartialEq)]
pub struct GenericDecisions {
    pub label: String,
    pub decisions: BTreeMap<TaskId, (LlmDecision, Option<Probability>)>,
}

impl GenericDecisions {
    /// Generic-user entries of `model_id`, labelled `G_<model_id>`.
    /// Entries with an unknown decision token are skipped.
    pub fn from_scripts(entries: &[crate::backend::ScriptEntry], model_id: &str) -> Self {
        let decisions = entries
            .iter()
            .filter(|e| e.model_id == model_id && e.user_id == crate::backend::GENERIC_USER)
            .filter_map(|e| {
                let d = LlmDecision::from_token(&e.decision)?;
                let c = e
                    .logprob
                    .filter(|l| !l.is_nan())
                    .and_then(|l| Probability::new(l.min(0.0).exp()).ok());
                Some((e.task_id.clone(), (d, c)))
            })
            .collect();
        Self {
            label: format!("G_{model_id}"),
            decisions,
        }
    }

    pub fn decisions_only(&self) -> BTreeMap<TaskId, LlmDecision> {
        self.decisions
            .iter()
            .map(|(k, (d, _))| (k.clone(), *d))
            .collect()
    }
}

fn type_key(tt: TaskType) -> &'static str {
    match tt {
        TaskType::NoScenario => "no_scenario",
        TaskType::Discretionary => "discretionary",
        TaskType::Essential => "essential",
        TaskType::Sensitive => "sensitive",
    }
}

/// Per task type: user totals, majority vs expert, and for each generic
/// model its expert matches and agreement with the majority. Two summary
/// rows follow: `all_micro` pools tasks, `all_macro` averages the type rows.
pub fn task_type_report(corpus: &Corpus, generic: &[GenericDecisions]) -> ReportTable {
    let mut columns = vec![
        "task_type".to_owned(),
        "tasks".into(),
        "decisions".into(),
        "deny_pct".into(),
        "majority_expert_match".into(),
    ];
    for g in generic {
        columns.push(format!("{}_expert_match", g.label));
        columns.push(format!("{}_agreement_pct", g.label));
    }
    let mut table = ReportTable::new("task_types", columns);
    let users = metrics::unique_user_decisions(&corpus.decisions);
    let majorities = metrics::majorities(&users);
    let llm: Vec<_> = generic
        .iter()
        .map(GenericDecisions::decisions_only)
        .collect();

    let expert_matches = |tasks: &[TaskId],
                          side: &dyn Fn(&TaskId) -> Option<crate::model::BinaryDecision>|
     -> Option<usize> {
        let with_expert: Vec<_> = tasks
            .iter()
            .filter_map(|t| {
                corpus
                    .task(t)
                    .and_then(|r| r.expert_recommendation)
                    .map(|e| (t, e))
            })
            .collect();
        (!with_expert.is_empty()).then(|| {
            with_expert
                .iter()
                .filter(|(t, e)| side(t) == Some(*e))
                .count()
        })
    };

    struct Row {
        tasks: usize,
        decisions: usize,
        deny: Option<f64>,
        majority_expert: Option<usize>,
        models: Vec<(Option<usize>, Option<f64>)>,
    }
    let compute = |ids: Vec<TaskId>| -> Row {
        let recs: Vec<DecisionRecord> = users
            .iter()
            .filter(|r| ids.contains(&r.task_id))
            .cloned()
            .collect();
        let ms: Vec<_> = ids.iter().filter_map(|t| majorities.get(t)).collect();
        Row {
            tasks: ids.len(),
            decisions: recs.iter().filter(|r| r.user_binary().is_some()).count(),
            deny: metrics::deny_rate(&recs).ok(),
            majority_expert: expert_matches(&ids, &|t| majorities.get(t).and_then(|m| m.decision)),
            models: llm
                .iter()
                .map(|l| {
                    (
                        expert_matches(&ids, &|t| l.get(t).and_then(Binarize::binarize)),
                        metrics::agreement_with_majority(l, ms.iter().copied())
                            .ok()
                            .map(|s| s.pct),
                    )
                })
                .collect(),
        }
    };
    let emit = |table: &mut ReportTable, key: &str, row: &Row| {
        let mut cells = vec![
            key.to_owned(),
            row.tasks.to_string(),
            row.decisions.to_string(),
            fmt_opt(row.deny),
            row.majority_expert
                .map_or_else(|| NA.to_owned(), |c| c.to_string()),
        ];
        for (e, a) in &row.models {
            cells.push(e.map_or_else(|| NA.to_owned(), |c| c.to_string()));
            cells.push(fmt_opt(*a));
        }
        table.push(cells);
    };

    let mut type_rows = Vec::new();
    for tt in TaskType::ALL {
        let ids: Vec<TaskId> = corpus.tasks_of_type(tt).map(|t| t.id.clone()).collect();
        let row = compute(ids);
        emit(&mut table, type_key(tt), &row);
        type_rows.push(row);
    }
    let all = compute(corpus.tasks.iter().map(|t| t.id.clone()).collect());
    emit(&mut table, "all_micro", &all);

    let mean = |vals: Vec<f64>| metrics::macro_aggregate(&vals).ok();
    let macro_row = Row {
        tasks: all.tasks,
        decisions: all.decisions,
        deny: mean(type_rows.iter().filter_map(|r| r.deny).collect()),
        majority_expert: all.majority_expert,
        models: (0..generic.len())
            .map(|i| {
                (
                    all.models[i].0,
                    mean(type_rows.iter().filter_map(|r| r.models[i].1).collect()),
                )
            })
            .collect(),
    };
    emit(&mut table, "all_macro", &macro_row);
    table
}

/// Initial user decision per (user, task).
pub fn initial_decisions(records: &[DecisionRecord]) -> HashMap<(UserId, TaskId), UserDecision> {
    records
        .iter()
        .map(|r| ((r.user_id.clone(), r.task_id.clone()), r.user_decision))
        .collect()
}

fn category_of(
    f: &FeedbackRecord,
    initial: &HashMap<(UserId, TaskId), UserDecision>,
) -> FeedbackCategory {
    metrics::classify_feedback(
        initial
            .get(&(f.user_id.clone(), f.task_id.clone()))
            .copied(),
        f.shown_verdict.decision,
    )
}

/// Response shares per feedback category, then an `all` row.
pub fn feedback_report(feedback: &[FeedbackRecord], records: &[DecisionRecord]) -> ReportTable {
    let mut table = ReportTable::new(
        "feedback",
        ["category", "total", "yes_pct", "no_pct", "not_sure_pct"],
    );
    let initial = initial_decisions(records);
    let mut push = |key: &str, items: Vec<&FeedbackRecord>| {
        if let Ok(s) = metrics::feedback_shares(items) {
            table.push(vec![
                key.to_owned(),
                s.total.to_string(),
                fmt2(s.yes_pct),
                fmt2(s.no_pct),
                fmt2(s.not_sure_pct),
            ]);
        }
    };
    for c in FeedbackCategory::ALL {
        push(
            c.label(),
            feedback
                .iter()
                .filter(|f| category_of(f, &initial) == c)
                .collect(),
        );
    }
    push("all", feedback.iter().collect());
    table
}

/// Per model and task type: agreement, violations against users and the
/// expert recommendation, and the two adjusted scores.
pub fn personalized_report(corpus: &Corpus) -> ReportTable {
    let mut table = ReportTable::new(
        "personalized",
        [
            "task_type",
            "model",
            "n",
            "agreement_pct",
            "user_security_pct",
            "user_usability_pct",
            "expert_security_pct",
            "expert_match_on_disagreement_pct",
            "expert_adjusted",
            "feedback_correct_pct",
            "feedback_adjusted",
        ],
    );
    let initial = initial_decisions(&corpus.decisions);
    let mut by_model: BTreeMap<String, Vec<&DecisionRecord>> = BTreeMap::new();
    for r in &corpus.decisions {
        by_model.entry(r.model.label()).or_default().push(r);
    }
    for (label, recs) in by_model {
        for tt in TaskType::ALL {
            let of_type: Vec<DecisionRecord> = recs
                .iter()
                .filter(|r| r.task_type == tt)
                .map(|r| (*r).clone())
                .collect();
            let Ok(agreement) = metrics::record_agreement(&of_type) else {
                continue;
            };
            let user_v = metrics::violation_rates(&of_type, Reference::UserDecision).ok();
            let expert_v = metrics::violation_rates(&of_type, Reference::ExpertRecommendation).ok();
            let expert_match = metrics::expert_agreement_on_disagreement(&of_type).ok();
            let disagreement_feedback: Vec<&FeedbackRecord> = corpus
                .feedback
                .iter()
                .filter(|f| corpus.task(&f.task_id).is_some_and(|t| t.task_type == tt))
                .filter(|f| category_of(f, &initial) == FeedbackCategory::Disagreed)
                .collect();
            let fb = metrics::feedback_correct_fraction(disagreement_feedback).ok();
            table.push(vec![
                type_key(tt).to_owned(),
                label.clone(),
                agreement.eligible.to_string(),
                fmt2(agreement.pct),
                fmt_opt(user_v.map(|v| v.security_rate)),
                fmt_opt(user_v.map(|v| v.usability_rate)),
                fmt_opt(expert_v.map(|v| v.security_rate)),
                fmt_opt(expert_match.map(|s| s.pct)),
                fmt_opt(
                    expert_match
                        .and_then(|s| metrics::adjusted_score(agreement.pct, s.pct / 100.0).ok()),
                ),
                fmt_opt(fb.map(|f| f * 100.0)),
                fmt_opt(fb.and_then(|f| metrics::adjusted_score(agreement.pct, f).ok())),
            ]);
        }
    }
    table
}

/// Agreement per user and model.
pub fn per_user_report(records: &[DecisionRecord]) -> ReportTable {
    let mut table = ReportTable::new("per_user", ["user_id", "model", "n", "agreement_pct"]);
    let mut groups: BTreeMap<(UserId, String), Vec<DecisionRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.user_id.clone(), r.model.label()))
            .or_default()
            .push(r.clone());
    }
    for ((user, model), rs) in groups {
        if let Ok(s) = metrics::record_agreement(&rs) {
            table.push(vec![
                user.to_string(),
                model,
                s.eligible.to_string(),
                fmt2(s.pct),
            ]);
        }
    }
    table
}

/// Inputs of the standard report set. Feedback is kept next to the corpus
/// because its initial decisions come from a different population.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub corpus: Corpus,
    pub generic: Vec<GenericDecisions>,
    pub feedback: Vec<FeedbackRecord>,
    pub feedback_initial: Vec<DecisionRecord>,
}

impl Evaluation {
    pub fn from_corpus(corpus: Corpus, generic: Vec<GenericDecisions>) -> Self {
        Self {
            feedback: corpus.feedback.clone(),
            feedback_initial: corpus.decisions.clone(),
            corpus,
            generic,
        }
    }

    /// Bundled tasks with synthetic decisions for the generic and
    /// personalized variant of each model, the bundled generic decisions,
    /// and synthetic feedback for the first model.
    pub fn bundled(models: &[String], seed: u64) -> Result<Self, crate::dataset::DatasetError> {
        use crate::dataset::{bundled, synthetic};
        use crate::model::ModelConfig;
        let configs: Vec<ModelConfig> = models
            .iter()
            .flat_map(|m| [ModelConfig::generic(m), ModelConfig::personalized(m)])
            .collect();
        let corpus = synthetic::bundled_corpus(&configs, seed)?;
        let scripts = bundled::generic_scripts();
        let generic = models
            .iter()
            .map(|m| GenericDecisions::from_scripts(&scripts, m))
            .collect();
        let (feedback, feedback_initial) = match models.first() {
            Some(m) => {
                let fb = synthetic::feedback_corpus(&ModelConfig::personalized(m), seed)?;
                (fb.feedback, fb.decisions)
            }
            None => (Vec::new(), Vec::new()),
        };
        Ok(Self {
            corpus,
            generic,
            feedback,
            feedback_initial,
        })
    }

    /// `task_types`, `personalized`, `per_user` and `feedback`, in that order.
    pub fn reports(&self) -> Vec<ReportTable> {
        vec![
            task_type_report(&self.corpus, &self.generic),
            personalized_report(&self.corpus),
            per_user_report(&self.corpus.decisions),
            feedback_report(&self.feedback, &self.feedback_initial),
        ]
    }
}

pub fn sweep_report(cells: &[SweepCell]) -> ReportTable {
    let mut table = ReportTable::new(
        "threshold_sweep",
        [
            "allow_threshold",
            "deny_threshold",
            "enforced",
            "total",
            "coverage_pct",
            "agreement_pct",
            "security_pct",
            "usability_pct",
        ],
    );
    for c in cells {
        table.push(vec![
            fmt2(c.allow_threshold),
            fmt2(c.deny_threshold),
            c.enforced.to_string(),
            c.total.to_string(),
            fmt2(c.coverage),
            fmt_opt(c.agreement),
            fmt_opt(c.security_rate),
            fmt_opt(c.usability_rate),
        ]);
    }
    table
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{bundled, synthetic};
    use crate::model::ModelConfig;

    fn generic_from_scripts() -> Vec<GenericDecisions> {
        let scripts = bundled::generic_scripts();
        ["gpt-4o", "mistral"]
            .iter()
            .map(|m| GenericDecisions::from_scripts(&scripts, m))
            .collect()
    }

    #[test]
    fn essential_row_is_full_agreement() {
        let corpus =
            synthetic::bundled_corpus(&[ModelConfig::generic("gpt-4o")], synthetic::DEFAULT_SEED)
                .unwrap();
        let t = task_type_report(&corpus, &generic_from_scripts());
        assert_eq!(
            t.cell("essential", "G_gpt-4o_agreement_pct"),
            Some("100.00")
        );
        assert_eq!(
            t.cell("essential", "G_mistral_agreement_pct"),
            Some("100.00")
        );
        assert_eq!(t.cell("essential", "majority_expert_match"), Some("6"));
        assert_eq!(t.cell("sensitive", "majority_expert_match"), Some("4"));
        assert_eq!(t.cell("sensitive", "G_gpt-4o_expert_match"), Some("5"));
        assert_eq!(t.cell("no_scenario", "decisions"), Some("0"));
        assert_eq!(t.cell("no_scenario", "G_gpt-4o_agreement_pct"), Some(NA));
    }

    #[test]
    fn empty_metrics_give_header_only_files() {
        let dir = tempfile::tempdir().unwrap();
        let tables = [
            sweep_report(&[]),
            per_user_report(&[]),
            feedback_report(&[], &[]),
            personalized_report(&Corpus::default()),
        ];
        for path in export_report(&tables, dir.path()).unwrap() {
            let text = std::fs::read_to_string(&path).unwrap();
            assert_eq!(text.lines().count(), 1, "{}", path.display());
        }
    }

    #[test]
    fn export_is_byte_identical() {
        let corpus = synthetic::bundled_corpus(
            &[
                ModelConfig::generic("gpt-4o"),
                ModelConfig::personalized("gpt-4o"),
            ],
            synthetic::DEFAULT_SEED,
        )
        .unwrap();
        let fb = synthetic::feedback_corpus(&ModelConfig::personalized("gpt-4o"), 5).unwrap();
        let tables = || {
            vec![
                task_type_report(&corpus, &generic_from_scripts()),
                personalized_report(&corpus),
                feedback_report(&fb.feedback, &fb.decisions),
                per_user_report(&corpus.decisions),
            ]
        };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let pa = export_report(&tables(), a.path()).unwrap();
        let pb = export_report(&tables(), b.path()).unwrap();
        for (x, y) in pa.iter().zip(&pb) {
            assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
        }
    }

    #[test]
    fn feedback_table_rows() {
        let corpus = synthetic::feedback_corpus(&ModelConfig::personalized("gpt-4o"), 9).unwrap();
        let t = feedback_report(&corpus.feedback, &corpus.decisions);
        assert_eq!(t.cell("Disagreed", "total"), Some("611"));
        assert_eq!(t.cell("Disagreed", "yes_pct"), Some("48.61"));
        assert_eq!(t.cell("all", "yes_pct"), Some("72.96"));
    }
}
