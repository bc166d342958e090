use std::path::Path;
use std::process::{Command, Output};
use std::sync::Arc;

use permgate_core::backend::{ScriptEntry, ScriptedBackend, SCRIPT_SCHEMA};
use permgate_core::dataset::{synthetic, write_corpus, Corpus, DECISIONS_SCHEMA};
use permgate_core::engine::{EngineConfig, Mediation, PolicyEngine, ThresholdConfig};
use permgate_core::jsonl;
use permgate_core::metrics::DecisionRecord;
use permgate_core::model::{
    AccessRequest, AppProfile, LlmDecision, ModelConfig, Permission, Probability, TaskType,
    UserDecision,
};

fn permgate(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_permgate"))
        .arg("--root")
        .arg(root)
        .args(args)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read(path: impl AsRef<Path>) -> String {
    std::fs::read_to_string(path).unwrap()
}

fn cell<'a>(tsv: &'a str, key: &str, column: &str) -> &'a str {
    let mut lines = tsv.lines();
    let header: Vec<&str> = lines.next().unwrap().split('\t').collect();
    let c = header.iter().position(|h| *h == column).unwrap();
    let row = lines.find(|l| l.split('\t').next() == Some(key)).unwrap();
    row.split('\t').nth(c).unwrap()
}

#[test]
fn bundled_evaluate_reports_generic_agreement() {
    let dir = tempfile::tempdir().unwrap();
    let out = permgate(dir.path(), &["evaluate", "--bundled"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let types = read(dir.path().join("reports/task_types.tsv"));
    assert_eq!(cell(&types, "sensitive", "G_gpt-4o_agreement_pct"), "50.00");
    assert_eq!(
        cell(&types, "sensitive", "G_mistral_agreement_pct"),
        "83.33"
    );
    assert_eq!(
        cell(&types, "essential", "G_gpt-4o_agreement_pct"),
        "100.00"
    );
    for name in ["personalized", "per_user", "feedback"] {
        assert!(
            dir.path().join(format!("reports/{name}.tsv")).exists(),
            "{name}"
        );
    }
}

#[test]
fn evaluate_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        assert!(
            permgate(d.path(), &["--seed", "7", "evaluate", "--bundled"])
                .status
                .success()
        );
    }
    for name in ["task_types", "personalized", "per_user", "feedback"] {
        let f = format!("reports/{name}.tsv");
        assert_eq!(read(a.path().join(&f)), read(b.path().join(&f)), "{name}");
    }
}

#[test]
fn empty_corpus_fails_with_no_decisions() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = Corpus {
        apps: permgate_core::dataset::bundled::apps(),
        ..Corpus::default()
    };
    write_corpus(&corpus, &dir.path().join("empty")).unwrap();
    let out = permgate(dir.path(), &["evaluate", "--corpus", "empty"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("no decisions"), "{}", stderr(&out));
}

#[test]
fn corpus_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synthetic::bundled_corpus(&[ModelConfig::generic("gpt-4o")], 1).unwrap();
    write_corpus(&corpus, &dir.path().join("c")).unwrap();
    let out = permgate(dir.path(), &["validate", "--corpus", "c"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains(&format!("decisions\t{}", corpus.decisions.len())));

    // a decision on an unknown task is a validation error
    let mut broken = corpus.clone();
    broken.decisions[0].task_id = "no-such-task".into();
    write_corpus(&broken, &dir.path().join("broken")).unwrap();
    assert_eq!(
        permgate(dir.path(), &["validate", "--corpus", "broken"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        permgate(dir.path(), &["evaluate", "--corpus", "broken"])
            .status
            .code(),
        Some(1)
    );
}

fn sample_record(
    user: &str,
    task: &str,
    decision: LlmDecision,
    confidence: Option<f64>,
) -> DecisionRecord {
    DecisionRecord {
        user_id: user.into(),
        task_id: task.into(),
        task_type: TaskType::Discretionary,
        user_decision: UserDecision::Deny,
        llm_decision: Some(decision),
        confidence: confidence.map(|c| Probability::new(c).unwrap()),
        model: ModelConfig::personalized("gpt-4o"),
    }
}

fn four_records() -> Vec<DecisionRecord> {
    vec![
        sample_record("u1", "t1", LlmDecision::Allow, Some(0.6)),
        sample_record("u2", "t1", LlmDecision::Allow, Some(0.9)),
        sample_record("u3", "t1", LlmDecision::Deny, Some(0.7)),
        sample_record("u4", "t1", LlmDecision::Deny, Some(0.95)),
    ]
}

#[test]
fn sweep_grid_rows() {
    let dir = tempfile::tempdir().unwrap();
    jsonl::write(
        &dir.path().join("records.jsonl"),
        DECISIONS_SCHEMA,
        &four_records(),
    )
    .unwrap();
    let out = permgate(
        dir.path(),
        &[
            "sweep",
            "--records",
            "records.jsonl",
            "--grid",
            "0,0.5,1",
            "--out",
            "s",
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let tsv = read(dir.path().join("s/threshold_sweep.tsv"));
    let rows: Vec<&str> = tsv.lines().skip(1).collect();
    assert_eq!(rows.len(), 9);
    assert!(rows[0].starts_with("0.00\t0.00\t4\t4\t"), "{}", rows[0]);
    assert_eq!(cell(&tsv, "0.00", "coverage_pct"), "100.00");

    let out = permgate(
        dir.path(),
        &[
            "sweep",
            "--records",
            "records.jsonl",
            "--grid",
            "0.8",
            "--out",
            "s8",
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let tsv = read(dir.path().join("s8/threshold_sweep.tsv"));
    // enforced: allow 0.9 and deny 0.95
    assert_eq!(cell(&tsv, "0.80", "coverage_pct"), "50.00");
}

#[test]
fn sweep_needs_confidences() {
    let dir = tempfile::tempdir().unwrap();
    let mut records = four_records();
    records[2].confidence = None;
    jsonl::write(
        &dir.path().join("records.jsonl"),
        DECISIONS_SCHEMA,
        &records,
    )
    .unwrap();
    let out = permgate(dir.path(), &["sweep", "--records", "records.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("confidence"), "{}", stderr(&out));
}

fn scripted_run(dir: &Path) {
    let scripts = vec![ScriptEntry {
        model_id: "gpt-4o".into(),
        user_id: "alice".into(),
        task_id: "foodguide-location".into(),
        decision: "deny".into(),
        justification: "Recipes do not need location.".into(),
        logprob: Some(0.9f64.ln()),
    }];
    jsonl::write(&dir.join("scripts.jsonl"), SCRIPT_SCHEMA, &scripts).unwrap();
    let engine = PolicyEngine::new(
        Arc::new(ScriptedBackend::from_entries(scripts).unwrap()),
        EngineConfig::default(),
    )
    .with_audit_log(&dir.join("audit.jsonl"))
    .unwrap();
    let request = |id: &str, permission| {
        AccessRequest::with_scenario(
            id,
            AppProfile::new("FoodGuide", "Food & Drink", "Recipe guide.").unwrap(),
            permission,
            TaskType::Discretionary,
            "You open the app to browse recipes.",
        )
        .unwrap()
    };
    for (id, permission, thresholds) in [
        (
            "foodguide-location",
            Permission::Location,
            Some(ThresholdConfig::new(0.5, 0.5).unwrap()),
        ),
        ("foodguide-location", Permission::Location, None),
        ("foodguide-camera", Permission::Camera, None),
        ("foodguide-photos", Permission::Photos, None),
    ] {
        engine
            .mediate(&Mediation {
                user_id: "alice".into(),
                request: request(id, permission),
                model: ModelConfig::personalized("gpt-4o"),
                thresholds,
                statement: None,
            })
            .unwrap();
    }
    let pending = engine.list_pending(None);
    engine
        .resolve_deferral(&pending[0].id, UserDecision::Deny)
        .unwrap();
}

#[test]
fn replay_scripted_log() {
    let dir = tempfile::tempdir().unwrap();
    scripted_run(dir.path());
    let out = permgate(
        dir.path(),
        &[
            "replay",
            "audit.jsonl",
            "--scripts",
            "scripts.jsonl",
            "--out",
            "replay.json",
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("decisions\t4"), "{text}");
    assert!(
        text.contains("enforced\t2") && text.contains("deferred\t2"),
        "{text}"
    );
    assert!(
        text.contains("resolutions\t1") && text.contains("pending\t1"),
        "{text}"
    );
    assert!(text.contains("divergences\t0"), "{text}");
    let first = read(dir.path().join("replay.json"));
    assert!(permgate(
        dir.path(),
        &[
            "replay",
            "audit.jsonl",
            "--scripts",
            "scripts.jsonl",
            "--out",
            "replay.json"
        ]
    )
    .status
    .success());
    assert_eq!(first, read(dir.path().join("replay.json")));

    // without the script the recorded enforcement no longer reproduces
    let out = permgate(dir.path(), &["replay", "audit.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("divergence"));
}

#[test]
fn replay_truncated_and_empty_logs() {
    let dir = tempfile::tempdir().unwrap();
    scripted_run(dir.path());
    let full = read(dir.path().join("audit.jsonl"));
    let cut = full.len() - 20;
    std::fs::write(dir.path().join("cut.jsonl"), &full[..cut]).unwrap();
    let out = permgate(
        dir.path(),
        &["replay", "cut.jsonl", "--scripts", "scripts.jsonl"],
    );
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(
        err.contains("parse error") && err.contains("byte offset"),
        "{err}"
    );

    std::fs::write(dir.path().join("empty.jsonl"), "").unwrap();
    let out = permgate(dir.path(), &["replay", "empty.jsonl"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(
        text.contains("decisions\t0") && text.contains("divergences\t0"),
        "{text}"
    );
}

#[test]
fn bad_flags_and_configs() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        permgate(dir.path(), &["sweep", "--grid", "0.5"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        permgate(dir.path(), &["evaluate", "--bundled", "--corpus", "x"])
            .status
            .code(),
        Some(1)
    );
    assert!(permgate(dir.path(), &["--help"]).status.success());
    std::fs::write(dir.path().join("bad.toml"), "bogus = 1\n").unwrap();
    let out = permgate(dir.path(), &["serve", "--config", "bad.toml"]);
    assert_eq!(out.status.code(), Some(1));
    let out = permgate(dir.path(), &["sweep", "--records", "missing.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
}
