//! Evaluation metrics over decision records.
//!
//! All rates are percentages in `[0, 100]`; all functions are pure over
//! their inputs. Records whose user decision does not binarize (`not sure`,
//! `would never`) and records without an LLM decision are excluded from
//! every denominator.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{FeedbackRecord, FeedbackResponse, ThresholdConfig};
use crate::model::{
    Binarize, BinaryDecision, LlmDecision, ModelConfig, Probability, TaskId, TaskType,
    UserDecision, UserId,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("no eligible records: {0}")]
    Empty(&'static str),
    #[error("record for user `{user}` on task `{task}` has no confidence")]
    MissingConfidence { user: UserId, task: TaskId },
    #[error("{0} is out of range")]
    OutOfRange(String),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 3 pairs, got {0}")]
    TooFewPairs(usize),
    #[error("zero variance in {0}")]
    DegenerateVariance(&'static str),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// One (user, task, model) observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionRecord {
    pub user_id: UserId,
    pub task_id: TaskId,
    pub task_type: TaskType,
    pub user_decision: UserDecision,
    #[serde(default)]
    pub llm_decision: Option<LlmDecision>,
    #[serde(default)]
    pub confidence: Option<Probability>,
    pub model: ModelConfig,
}

impl DecisionRecord {
    pub fn user_binary(&self) -> Option<BinaryDecision> {
        self.user_decision.binarize()
    }

    pub fn llm_binary(&self) -> Option<BinaryDecision> {
        self.llm_decision.binarize()
    }

    /// Both sides binarizable.
    pub fn scored(&self) -> Option<(BinaryDecision, BinaryDecision)> {
        Some((self.user_binary()?, self.llm_binary()?))
    }
}

fn pct(num: usize, den: usize) -> f64 {
    100.0 * num as f64 / den as f64
}

/// Majority of the binarized user decisions for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MajorityResult {
    pub task_id: TaskId,
    /// Absent on an exact tie.
    pub decision: Option<BinaryDecision>,
    /// Fraction of users on the majority side; 0.5 on a tie.
    pub strength: f64,
    pub n: usize,
}

impl MajorityResult {
    pub fn from_counts(task_id: TaskId, allow: usize, deny: usize) -> Result<Self> {
        let n = allow + deny;
        if n == 0 {
            return Err(MetricsError::Empty("majority vote needs a decision"));
        }
        let (decision, top) = match allow.cmp(&deny) {
            std::cmp::Ordering::Greater => (Some(BinaryDecision::Allow), allow),
            std::cmp::Ordering::Less => (Some(BinaryDecision::Deny), deny),
            std::cmp::Ordering::Equal => (None, allow),
        };
        Ok(Self {
            task_id,
            decision,
            strength: top as f64 / n as f64,
            n,
        })
    }

    /// Fraction of users who chose `decision`.
    pub fn share_of(&self, decision: BinaryDecision) -> f64 {
        match self.decision {
            None => 0.5,
            Some(d) if d == decision => self.strength,
            Some(_) => 1.0 - self.strength,
        }
    }
}

fn count_binary<'a>(decisions: impl IntoIterator<Item = &'a UserDecision>) -> (usize, usize) {
    decisions
        .into_iter()
        .filter_map(Binarize::binarize)
        .fold((0, 0), |(a, d), b| match b {
            BinaryDecision::Allow => (a + 1, d),
            BinaryDecision::Deny => (a, d + 1),
        })
}

/// Majority vote over one task's records.
pub fn majority_vote(task_id: &TaskId, records: &[DecisionRecord]) -> Result<MajorityResult> {
    let (allow, deny) = count_binary(
        records
            .iter()
            .filter(|r| &r.task_id == task_id)
            .map(|r| &r.user_decision),
    );
    MajorityResult::from_counts(task_id.clone(), allow, deny)
}

/// One user decision per (user, task), dropping the per-model duplicates.
pub fn unique_user_decisions(records: &[DecisionRecord]) -> Vec<DecisionRecord> {
    let mut seen = BTreeSet::new();
    records
        .iter()
        .filter(|r| seen.insert((r.user_id.clone(), r.task_id.clone())))
        .cloned()
        .collect()
}

/// Majorities for every task with at least one binarizable decision.
pub fn majorities(records: &[DecisionRecord]) -> BTreeMap<TaskId, MajorityResult> {
    let mut counts: BTreeMap<TaskId, (usize, usize)> = BTreeMap::new();
    for r in unique_user_decisions(records) {
        if let Some(b) = r.user_binary() {
            let c = counts.entry(r.task_id.clone()).or_default();
            match b {
                BinaryDecision::Allow => c.0 += 1,
                BinaryDecision::Deny => c.1 += 1,
            }
        }
    }
    counts
        .into_iter()
        .map(|(task, (a, d))| {
            let m =
                MajorityResult::from_counts(task.clone(), a, d).expect("non-empty by construction");
            (task, m)
        })
        .collect()
}

/// Share of deny among binarizable user decisions.
pub fn deny_rate(records: &[DecisionRecord]) -> Result<f64> {
    let (allow, deny) = count_binary(records.iter().map(|r| &r.user_decision));
    if allow + deny == 0 {
        return Err(MetricsError::Empty("deny rate"));
    }
    Ok(pct(deny, allow + deny))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgreementScore {
    pub pct: f64,
    pub matched: usize,
    pub eligible: usize,
}

impl AgreementScore {
    fn new(matched: usize, eligible: usize, what: &'static str) -> Result<Self> {
        if eligible == 0 {
            return Err(MetricsError::Empty(what));
        }
        Ok(Self {
            pct: pct(matched, eligible),
            matched,
            eligible,
        })
    }
}

/// Share of tasks whose binarized LLM decision equals the user majority.
/// Tied tasks and tasks without an LLM decision are excluded.
pub fn agreement_with_majority<'a>(
    llm: &BTreeMap<TaskId, LlmDecision>,
    majorities: impl IntoIterator<Item = &'a MajorityResult>,
) -> Result<AgreementScore> {
    let (mut matched, mut eligible) = (0, 0);
    for m in majorities {
        let (Some(majority), Some(decision)) = (m.decision, llm.get(&m.task_id)) else {
            continue;
        };
        eligible += 1;
        if decision.binarize() == Some(majority) {
            matched += 1;
        }
    }
    AgreementScore::new(matched, eligible, "agreement with majority")
}

/// Per-record agreement between user and LLM.
pub fn record_agreement(records: &[DecisionRecord]) -> Result<AgreementScore> {
    let scored: Vec<_> = records.iter().filter_map(DecisionRecord::scored).collect();
    let matched = scored.iter().filter(|(u, l)| u == l).count();
    AgreementScore::new(matched, scored.len(), "record agreement")
}

/// Agreement for one user's records, in percent.
pub fn per_user_agreement(records: &[DecisionRecord]) -> Result<f64> {
    record_agreement(records).map(|s| s.pct)
}

/// Agreement per user, for users with at least one scored record.
pub fn per_user_agreements(records: &[DecisionRecord]) -> BTreeMap<UserId, f64> {
    let mut by_user: BTreeMap<UserId, Vec<DecisionRecord>> = BTreeMap::new();
    for r in records {
        by_user
            .entry(r.user_id.clone())
            .or_default()
            .push(r.clone());
    }
    by_user
        .into_iter()
        .filter_map(|(u, rs)| per_user_agreement(&rs).ok().map(|a| (u, a)))
        .collect()
}

/// Linear-interpolation percentile (`q` in `[0, 1]`) of `values`.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(MetricsError::Empty("percentile"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(MetricsError::OutOfRange(format!("quantile {q}")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64))
}

/// Distribution summary of per-user agreement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub n: usize,
    pub min: f64,
    pub p25: f64,
    pub median: f64,
    pub p75: f64,
    pub max: f64,
    pub mean: f64,
}

pub fn spread(values: &[f64]) -> Result<Spread> {
    Ok(Spread {
        n: values.len(),
        min: percentile(values, 0.0)?,
        p25: percentile(values, 0.25)?,
        median: percentile(values, 0.5)?,
        p75: percentile(values, 0.75)?,
        max: percentile(values, 1.0)?,
        mean: values.iter().sum::<f64>() / values.len() as f64,
    })
}

/// Reference side (rows) against LLM side (columns).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub allow_allow: usize,
    pub allow_deny: usize,
    pub deny_allow: usize,
    pub deny_deny: usize,
}

impl ConfusionMatrix {
    pub fn add(&mut self, reference: BinaryDecision, llm: BinaryDecision) {
        use BinaryDecision::{Allow, Deny};
        match (reference, llm) {
            (Allow, Allow) => self.allow_allow += 1,
            (Allow, Deny) => self.allow_deny += 1,
            (Deny, Allow) => self.deny_allow += 1,
            (Deny, Deny) => self.deny_deny += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.allow_allow + self.allow_deny + self.deny_allow + self.deny_deny
    }

    /// LLM allows where the reference denies.
    pub fn false_allows(&self) -> usize {
        self.deny_allow
    }

    /// LLM denies where the reference allows.
    pub fn false_denies(&self) -> usize {
        self.allow_deny
    }
}

/// What an LLM decision is judged against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reference {
    UserDecision,
    /// Only essential and sensitive tasks carry one.
    ExpertRecommendation,
}

fn reference_of(record: &DecisionRecord, reference: Reference) -> Option<BinaryDecision> {
    match reference {
        Reference::UserDecision => record.user_binary(),
        Reference::ExpertRecommendation => {
            // the record still has to be part of the analyzed set
            record.user_binary()?;
            record.task_type.expert_recommendation()
        }
    }
}

pub fn confusion_matrix(records: &[DecisionRecord], reference: Reference) -> ConfusionMatrix {
    let mut m = ConfusionMatrix::default();
    for r in records {
        if let (Some(reference), Some(llm)) = (reference_of(r, reference), r.llm_binary()) {
            m.add(reference, llm);
        }
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViolationReport {
    /// LLM allowed where the reference denied.
    pub security_rate: f64,
    /// LLM denied where the reference allowed.
    pub usability_rate: f64,
    pub n: usize,
}

pub fn violation_rates(
    records: &[DecisionRecord],
    reference: Reference,
) -> Result<ViolationReport> {
    let m = confusion_matrix(records, reference);
    let n = m.total();
    if n == 0 {
        return Err(MetricsError::Empty("violation rates"));
    }
    Ok(ViolationReport {
        security_rate: pct(m.false_allows(), n),
        usability_rate: pct(m.false_denies(), n),
        n,
    })
}

/// Agreement plus the disagreement mass credited at rate `correct_fraction`.
pub fn adjusted_score(agreement_pct: f64, correct_fraction: f64) -> Result<f64> {
    if !(0.0..=100.0).contains(&agreement_pct) {
        return Err(MetricsError::OutOfRange(format!(
            "agreement {agreement_pct}"
        )));
    }
    if !(0.0..=1.0).contains(&correct_fraction) {
        return Err(MetricsError::OutOfRange(format!(
            "correct fraction {correct_fraction}"
        )));
    }
    Ok(agreement_pct + (100.0 - agreement_pct) * correct_fraction)
}

/// Fraction of feedback answering `yes`.
pub fn feedback_correct_fraction<'a>(
    feedback: impl IntoIterator<Item = &'a FeedbackRecord>,
) -> Result<f64> {
    let (yes, total) = feedback.into_iter().fold((0usize, 0usize), |(y, t), f| {
        (y + usize::from(f.response == FeedbackResponse::Yes), t + 1)
    });
    if total == 0 {
        return Err(MetricsError::Empty("feedback"));
    }
    Ok(yes as f64 / total as f64)
}

/// How the user's initial decision related to the verdict they rated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackCategory {
    Agreed,
    Disagreed,
    AllowVsOnce,
    NotDecided,
}

impl FeedbackCategory {
    pub const ALL: [FeedbackCategory; 4] = [
        FeedbackCategory::Agreed,
        FeedbackCategory::Disagreed,
        FeedbackCategory::AllowVsOnce,
        FeedbackCategory::NotDecided,
    ];

    pub fn label(self) -> &'static str {
        match self {
            FeedbackCategory::Agreed => "Agreed",
            FeedbackCategory::Disagreed => "Disagreed",
            FeedbackCategory::AllowVsOnce => "Allow vs Once",
            FeedbackCategory::NotDecided => "Not Decided",
        }
    }
}

pub fn classify_feedback(initial: Option<UserDecision>, shown: LlmDecision) -> FeedbackCategory {
    let Some(initial) = initial else {
        return FeedbackCategory::NotDecided;
    };
    match initial.binarize() {
        None => FeedbackCategory::NotDecided,
        Some(b) if Some(b) != shown.binarize() => FeedbackCategory::Disagreed,
        Some(_) if initial == UserDecision::from(shown) => FeedbackCategory::Agreed,
        Some(_) => FeedbackCategory::AllowVsOnce,
    }
}

/// Response shares for one group of feedback.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeedbackShares {
    pub total: usize,
    pub yes_pct: f64,
    pub no_pct: f64,
    pub not_sure_pct: f64,
}

pub fn feedback_shares<'a>(
    feedback: impl IntoIterator<Item = &'a FeedbackRecord>,
) -> Result<FeedbackShares> {
    let mut counts = [0usize; 3];
    for f in feedback {
        counts[match f.response {
            FeedbackResponse::Yes => 0,
            FeedbackResponse::No => 1,
            FeedbackResponse::NotSure => 2,
        }] += 1;
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(MetricsError::Empty("feedback shares"));
    }
    Ok(FeedbackShares {
        total,
        yes_pct: pct(counts[0], total),
        no_pct: pct(counts[1], total),
        not_sure_pct: pct(counts[2], total),
    })
}

/// Among records where LLM and user disagree on an essential or sensitive
/// task, how often the LLM matches the expert recommendation.
pub fn expert_agreement_on_disagreement(records: &[DecisionRecord]) -> Result<AgreementScore> {
    let (mut matched, mut eligible) = (0, 0);
    for r in records {
        let (Some((user, llm)), Some(expert)) = (r.scored(), r.task_type.expert_recommendation())
        else {
            continue;
        };
        if user != llm {
            eligible += 1;
            matched += usize::from(llm == expert);
        }
    }
    AgreementScore::new(matched, eligible, "expert agreement on disagreement")
}

/// Unweighted mean over per-category scores.
pub fn macro_aggregate(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(MetricsError::Empty("macro aggregate"));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PermutationTest {
    pub resamples: usize,
    pub seed: u64,
}

impl Default for PermutationTest {
    fn default() -> Self {
        Self {
            resamples: 10_000,
            seed: 0x00c0_ffee,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub r: f64,
    /// Two-sided permutation p-value.
    pub p_value: f64,
    pub n: usize,
}

/// Product-moment correlation coefficient.
pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(MetricsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 3 {
        return Err(MetricsError::TooFewPairs(x.len()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(MetricsError::DegenerateVariance("x"));
    }
    if syy == 0.0 {
        return Err(MetricsError::DegenerateVariance("y"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson's r with a seeded two-sided permutation p-value,
/// `(1 + #{|r_perm| >= |r|}) / (1 + resamples)`.
pub fn pearson(x: &[f64], y: &[f64], test: PermutationTest) -> Result<CorrelationResult> {
    let r = pearson_r(x, y)?;
    let mut rng = ChaCha8Rng::seed_from_u64(test.seed);
    let mut shuffled = y.to_vec();
    let threshold = r.abs() - 1e-12;
    let mut extreme = 0usize;
    for _ in 0..test.resamples {
        shuffled.shuffle(&mut rng);
        let rp = pearson_r(x, &shuffled)?;
        if rp.abs() >= threshold {
            extreme += 1;
        }
    }
    Ok(CorrelationResult {
        r,
        p_value: (1 + extreme) as f64 / (1 + test.resamples) as f64,
        n: x.len(),
    })
}

/// Pairs of (LLM confidence, share of users choosing the LLM's decision)
/// for every task with a majority and a confident LLM decision.
pub fn confidence_consensus_pairs(
    llm: &BTreeMap<TaskId, (LlmDecision, Option<Probability>)>,
    majorities: &BTreeMap<TaskId, MajorityResult>,
) -> (Vec<f64>, Vec<f64>) {
    let mut conf = Vec::new();
    let mut share = Vec::new();
    for (task, (decision, confidence)) in llm {
        let (Some(c), Some(m), Some(b)) = (confidence, majorities.get(task), decision.binarize())
        else {
            continue;
        };
        conf.push(c.value());
        share.push(m.share_of(b));
    }
    (conf, share)
}

/// Correlation between statement length (characters) and per-user agreement.
pub fn statement_length_correlation(
    records: &[DecisionRecord],
    statements: &[crate::model::PrivacyStatement],
    test: PermutationTest,
) -> Result<CorrelationResult> {
    let agreements = per_user_agreements(records);
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for s in statements {
        if let Some(a) = agreements.get(&s.user_id) {
            x.push(s.char_len() as f64);
            y.push(*a);
        }
    }
    pearson(&x, &y, test)
}

/// Confidence distribution summary, bins of width `1 / bins` over `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceSummary {
    pub n: usize,
    pub mean_pct: f64,
    pub std_pct: f64,
    pub histogram: Vec<usize>,
}

pub fn confidence_summary(records: &[DecisionRecord], bins: usize) -> Result<ConfidenceSummary> {
    let values: Vec<f64> = records
        .iter()
        .filter(|r| r.llm_decision.is_some())
        .filter_map(|r| r.confidence.map(|c| c.value() * 100.0))
        .collect();
    if values.is_empty() || bins == 0 {
        return Err(MetricsError::Empty("confidence summary"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let mut histogram = vec![0; bins];
    for v in &values {
        let idx = ((v / 100.0) * bins as f64).floor() as usize;
        histogram[idx.min(bins - 1)] += 1;
    }
    Ok(ConfidenceSummary {
        n: values.len(),
        mean_pct: mean,
        std_pct: var.sqrt(),
        histogram,
    })
}

/// Performance at one threshold pair. Rates are over enforced records and
/// absent when nothing is enforced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub allow_threshold: f64,
    pub deny_threshold: f64,
    pub agreement: Option<f64>,
    pub coverage: f64,
    pub security_rate: Option<f64>,
    pub usability_rate: Option<f64>,
    pub enforced: usize,
    pub total: usize,
}

/// Cartesian grid, allow threshold outer, deny threshold inner.
pub fn threshold_grid(
    values: &[f64],
) -> std::result::Result<Vec<ThresholdConfig>, crate::model::ModelError> {
    let mut grid = Vec::with_capacity(values.len() * values.len());
    for &a in values {
        for &d in values {
            grid.push(ThresholdConfig::new(a, d)?);
        }
    }
    Ok(grid)
}

/// Applies enforce-vs-defer at every grid point.
pub fn threshold_sweep(
    records: &[DecisionRecord],
    grid: &[ThresholdConfig],
) -> Result<Vec<SweepCell>> {
    let mut scored = Vec::new();
    for r in records {
        let (Some(user), Some(llm)) = (r.user_binary(), r.llm_decision) else {
            continue;
        };
        let confidence = r
            .confidence
            .ok_or_else(|| MetricsError::MissingConfidence {
                user: r.user_id.clone(),
                task: r.task_id.clone(),
            })?;
        scored.push((user, llm, confidence));
    }
    if scored.is_empty() {
        return Err(MetricsError::Empty("threshold sweep"));
    }
    let total = scored.len();
    Ok(grid
        .iter()
        .map(|t| {
            let mut m = ConfusionMatrix::default();
            for (user, llm, c) in &scored {
                if t.admits(*llm, Some(*c)) {
                    m.add(*user, llm.binarize().expect("llm decisions binarize"));
                }
            }
            let enforced = m.total();
            let rate = |k: usize| (enforced > 0).then(|| pct(k, enforced));
            SweepCell {
                allow_threshold: t.allow_threshold(),
                deny_threshold: t.deny_threshold(),
                agreement: rate(m.allow_allow + m.deny_deny),
                coverage: pct(enforced, total),
                security_rate: rate(m.false_allows()),
                usability_rate: rate(m.false_denies()),
                enforced,
                total,
            }
        })
        .collect())
}
