//! The `permgate` operator tool.
//!
//! Exit codes: 0 success, 1 invalid input (corpus, records, log, flags),
//! 2 backend failure or replay divergence.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use permgate_core::audit::{self, AuditError};
use permgate_core::backend::{ScriptEntry, ScriptedBackend, SCRIPT_SCHEMA};
use permgate_core::dataset::{self, bundled, synthetic, CorpusPaths, DECISIONS_SCHEMA};
use permgate_core::jsonl;
use permgate_core::metrics::{self, DecisionRecord};
use permgate_core::report::{self, Evaluation, GenericDecisions};
use permgate_service::{ServiceConfig, BUNDLED_MODELS};
use thiserror::Error;

#[derive(Debug, Parser)]
#[command(name = "permgate", version, about = "Permission decision tooling")]
pub struct Cli {
    /// Base directory for every relative path.
    #[arg(long, global = true, default_value = ".")]
    pub root: PathBuf,
    /// Seed for synthetic expansion and example sampling.
    #[arg(long, global = true, default_value_t = synthetic::DEFAULT_SEED)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the agreement, personalization and feedback reports.
    Evaluate(EvaluateArgs),
    /// Write one row per threshold pair.
    Sweep(SweepArgs),
    /// Run the HTTP API.
    Serve(ServeArgs),
    /// Re-execute an audit log and report divergences.
    Replay(ReplayArgs),
    /// Check a corpus directory.
    Validate(CorpusArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CorpusArgs {
    /// Corpus directory (apps.jsonl, tasks.jsonl, decisions.jsonl, ...).
    #[arg(long, conflicts_with = "bundled", required_unless_present = "bundled")]
    pub corpus: Option<PathBuf>,
    /// Use the bundled tasks with synthetic decisions.
    #[arg(long)]
    pub bundled: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub source: CorpusArgs,
    /// Generic model ids to compare with the majority.
    #[arg(long = "model")]
    pub models: Vec<String>,
    /// Script files holding the generic decisions.
    #[arg(long = "generic-scripts")]
    pub generic_scripts: Vec<PathBuf>,
    #[arg(long, default_value = "reports")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    /// Decision records with confidences.
    #[arg(long, conflicts_with = "corpus", required_unless_present = "corpus")]
    pub records: Option<PathBuf>,
    /// Use the decisions of a corpus directory.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Only records of this model label (e.g. `P_gpt-4o`).
    #[arg(long)]
    pub model: Option<String>,
    /// Threshold values, used on both axes.
    #[arg(long, value_delimiter = ',', default_values_t = default_grid())]
    pub grid: Vec<f64>,
    #[arg(long, default_value = "reports")]
    pub out: PathBuf,
}

fn default_grid() -> Vec<f64> {
    (0..=10).map(|i| f64::from(i) / 10.0).collect()
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    /// TOML configuration; the bundled setup when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub bind: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    pub log: PathBuf,
    /// Script files for the backend.
    #[arg(long = "scripts")]
    pub scripts: Vec<PathBuf>,
    /// Also load the bundled generic decisions.
    #[arg(long)]
    pub bundled_scripts: bool,
    /// Write the full report as JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Backend(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Backend(_) => 2,
        }
    }
}

fn invalid(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

fn rooted(root: &Path, p: &Path) -> PathBuf {
    if p.is_relative() {
        root.join(p)
    } else {
        p.to_owned()
    }
}

fn read_scripts(root: &Path, paths: &[PathBuf]) -> Result<Vec<ScriptEntry>, CliError> {
    let mut out = Vec::new();
    for p in paths {
        out.extend(jsonl::read::<ScriptEntry>(&rooted(root, p), SCRIPT_SCHEMA).map_err(invalid)?);
    }
    Ok(out)
}

/// Runs a command; returns the lines to print on success.
pub fn run(cli: &Cli) -> Result<Vec<String>, CliError> {
    let root = cli.root.as_path();
    match &cli.command {
        Command::Evaluate(args) => evaluate(root, cli.seed, args),
        Command::Sweep(args) => sweep(root, args),
        Command::Serve(args) => serve(root, cli.seed, args),
        Command::Replay(args) => replay(root, args),
        Command::Validate(args) => validate(root, cli.seed, args),
    }
}

fn evaluation(root: &Path, seed: u64, args: &EvaluateArgs) -> Result<Evaluation, CliError> {
    if args.source.bundled {
        let models: Vec<String> = if args.models.is_empty() {
            BUNDLED_MODELS.iter().map(|m| m.to_string()).collect()
        } else {
            args.models.clone()
        };
        return Evaluation::bundled(&models, seed).map_err(invalid);
    }
    let dir = rooted(
        root,
        args.source
            .corpus
            .as_deref()
            .expect("clap requires a source"),
    );
    let corpus = dataset::load_corpus(&CorpusPaths::in_dir(&dir)).map_err(invalid)?;
    let scripts = read_scripts(root, &args.generic_scripts)?;
    let mut models = args.models.clone();
    if models.is_empty() {
        models = scripts.iter().map(|e| e.model_id.clone()).collect();
        models.sort();
        models.dedup();
    }
    let generic = models
        .iter()
        .map(|m| GenericDecisions::from_scripts(&scripts, m))
        .collect();
    Ok(Evaluation::from_corpus(corpus, generic))
}

fn evaluate(root: &Path, seed: u64, args: &EvaluateArgs) -> Result<Vec<String>, CliError> {
    let eval = evaluation(root, seed, args)?;
    if eval.corpus.decisions.is_empty() {
        return Err(CliError::Validation("no decisions in corpus".into()));
    }
    let out = rooted(root, &args.out);
    std::fs::create_dir_all(&out).map_err(invalid)?;
    let written = report::export_report(&eval.reports(), &out).map_err(invalid)?;
    Ok(written
        .iter()
        .map(|p| format!("wrote {}", p.display()))
        .collect())
}

fn sweep(root: &Path, args: &SweepArgs) -> Result<Vec<String>, CliError> {
    let mut records: Vec<DecisionRecord> = match (&args.records, &args.corpus) {
        (Some(path), _) => jsonl::read(&rooted(root, path), DECISIONS_SCHEMA).map_err(invalid)?,
        (None, Some(dir)) => {
            dataset::load_corpus(&CorpusPaths::in_dir(&rooted(root, dir)))
                .map_err(invalid)?
                .decisions
        }
        (None, None) => unreachable!("clap requires a source"),
    };
    if let Some(label) = &args.model {
        records.retain(|r| &r.model.label() == label);
    }
    if records.is_empty() {
        return Err(CliError::Validation("no decisions to sweep".into()));
    }
    let grid = metrics::threshold_grid(&args.grid).map_err(invalid)?;
    let cells = metrics::threshold_sweep(&records, &grid).map_err(invalid)?;
    let out = rooted(root, &args.out);
    std::fs::create_dir_all(&out).map_err(invalid)?;
    let written = report::export_report(&[report::sweep_report(&cells)], &out).map_err(invalid)?;
    Ok(written
        .iter()
        .map(|p| format!("wrote {} ({} cells)", p.display(), cells.len()))
        .collect())
}

fn service_config(root: &Path, seed: u64, args: &ServeArgs) -> Result<ServiceConfig, CliError> {
    let config = match &args.config {
        Some(path) => {
            let path = rooted(root, path);
            let base = path.parent().unwrap_or(root).to_owned();
            ServiceConfig::load(&path).map_err(invalid)?.rooted(&base)
        }
        None => ServiceConfig {
            example_seed: seed,
            ..ServiceConfig::bundled()
        },
    };
    let mut config = config
        .apply_env(|k| std::env::var(k).ok())
        .map_err(invalid)?;
    if let Some(bind) = &args.bind {
        config.bind = bind.clone();
    }
    Ok(config)
}

fn serve(root: &Path, seed: u64, args: &ServeArgs) -> Result<Vec<String>, CliError> {
    let config = service_config(root, seed, args)?;
    let state = permgate_service::build_state(&config).map_err(|e| match e {
        permgate_service::StartupError::Backend(m) => CliError::Backend(m),
        other => invalid(other),
    })?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Backend(e.to_string()))?;
    eprintln!("listening on {}", config.bind);
    runtime
        .block_on(permgate_service::serve(state, &config.bind))
        .map_err(|e| CliError::Backend(e.to_string()))?;
    Ok(Vec::new())
}

fn replay(root: &Path, args: &ReplayArgs) -> Result<Vec<String>, CliError> {
    let events = audit::read_log(&rooted(root, &args.log)).map_err(|e| match e {
        AuditError::Parse { .. } => CliError::Validation(format!("parse error: {e}")),
        other => invalid(other),
    })?;
    let mut scripts = read_scripts(root, &args.scripts)?;
    if args.bundled_scripts {
        scripts.extend(bundled::generic_scripts());
    }
    let backend = ScriptedBackend::from_entries(scripts).map_err(invalid)?;
    let report = audit::replay(&events, &backend, Default::default()).map_err(invalid)?;
    let mut lines = vec![
        format!("decisions\t{}", report.decisions),
        format!("enforced\t{}", report.enforced),
        format!("deferred\t{}", report.deferred),
        format!("resolutions\t{}", report.resolutions),
        format!("feedback\t{}", report.feedback),
        format!("pending\t{}", report.pending.len()),
        format!("divergences\t{}", report.divergences.len()),
    ];
    if let Some(out) = &args.out {
        let out = rooted(root, out);
        let text = serde_json::to_string_pretty(&report).map_err(invalid)?;
        std::fs::write(&out, text + "\n").map_err(invalid)?;
        lines.push(format!("wrote {}", out.display()));
    }
    if let Some(d) = report.divergences.first() {
        return Err(CliError::Backend(format!(
            "{} divergence(s); first at seq {} (task `{}`)",
            report.divergences.len(),
            d.seq,
            d.task_id
        )));
    }
    Ok(lines)
}

fn validate(root: &Path, seed: u64, args: &CorpusArgs) -> Result<Vec<String>, CliError> {
    let corpus = if args.bundled {
        let models: Vec<String> = BUNDLED_MODELS.iter().map(|m| m.to_string()).collect();
        Evaluation::bundled(&models, seed).map_err(invalid)?.corpus
    } else {
        let dir = rooted(
            root,
            args.corpus.as_deref().expect("clap requires a source"),
        );
        dataset::load_corpus(&CorpusPaths::in_dir(&dir)).map_err(invalid)?
    };
    Ok(vec![
        format!("apps\t{}", corpus.apps.len()),
        format!("tasks\t{}", corpus.tasks.len()),
        format!("decisions\t{}", corpus.decisions.len()),
        format!("statements\t{}", corpus.statements.len()),
        format!("feedback\t{}", corpus.feedback.len()),
        "ok".into(),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn command_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn defaults() {
        let cli = Cli::try_parse_from(["permgate", "sweep", "--records", "r.jsonl"]).unwrap();
        assert_eq!(cli.seed, synthetic::DEFAULT_SEED);
        assert_eq!(cli.root, PathBuf::from("."));
        match cli.command {
            Command::Sweep(args) => {
                assert_eq!(args.grid.len(), 11);
                assert_eq!(args.grid[10], 1.0);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn sources_are_exclusive() {
        assert!(Cli::try_parse_from(["permgate", "evaluate"]).is_err());
        assert!(
            Cli::try_parse_from(["permgate", "evaluate", "--bundled", "--corpus", "c"]).is_err()
        );
        let cli =
            Cli::try_parse_from(["permgate", "--seed", "3", "validate", "--bundled"]).unwrap();
        assert_eq!(cli.seed, 3);
    }
}
