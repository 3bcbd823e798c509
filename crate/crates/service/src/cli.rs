//! Command-line front end. Every subcommand is a thin wrapper over one
//! engine operation; failures print `{"error","message"}` on stderr.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use riskscope_core::case_model::{CaseError, CaseInput};
use riskscope_core::engine::{DatasetKind, Engine, EngineError};
use riskscope_core::eval::{table_summary, Ablation, BenchmarkConfig, GoldCase};
use riskscope_core::extraction::{distill_corpus, load_corpus};
use riskscope_core::flywheel::{AnnotationRecord, ReviewDecision};
use riskscope_core::jsonl;
use riskscope_core::kb::{EntryKind, KbEntry, ReviewStatus};
use riskscope_core::rnr::{Actor, Role};
use serde_json::json;

use crate::api::{self, AppState};
use crate::auth;
use crate::config::{ConfigError, ServiceConfig};

#[derive(Debug, Parser)]
#[command(name = "riskscope", version, about = "Risk-case investigation service")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON or TOML config file.
    #[arg(long, global = true, env = "RISKSCOPE_CONFIG")]
    pub config: Option<PathBuf>,
    /// Backend id to use as the default.
    #[arg(long, global = true)]
    pub backend: Option<String>,
    /// Mock script file for the `mock` backend.
    #[arg(long, global = true)]
    pub mock_script: Option<PathBuf>,
    /// Actor recorded in audit lines. The CLI always acts as an expert.
    #[arg(long, global = true, default_value = "cli")]
    pub actor: String,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Distill a document corpus into candidate knowledge entries.
    IngestCorpus {
        /// Directory holding manifest.json and the documents.
        #[arg(long)]
        corpus: PathBuf,
        /// Candidate entries are written here as JSON lines.
        #[arg(long)]
        out: PathBuf,
        /// Skip the model-assisted merge of similar risk patterns.
        #[arg(long)]
        no_model_merge: bool,
    },
    /// Commit candidate entries (JSON lines) into the knowledge base.
    BuildKb {
        #[arg(long)]
        candidates: PathBuf,
    },
    /// Set the review status of one knowledge entry.
    KbReview {
        #[arg(long)]
        kind: EntryKind,
        #[arg(long)]
        id: String,
        #[arg(long)]
        status: ReviewStatus,
    },
    /// Draft and refine a case; prints the refined report.
    Investigate {
        /// A case JSON file, or the id of a stored case.
        #[arg(long)]
        case: String,
    },
    /// Accept or reject a report.
    Review {
        #[arg(long)]
        report: String,
        #[arg(long, value_parser = parse_decision)]
        decision: ReviewDecision,
    },
    /// Record an annotation from a JSON file.
    Annotate {
        #[arg(long)]
        record: PathBuf,
    },
    /// Synthesize a reasoning sample for an annotated case.
    Cot {
        #[arg(long)]
        case: String,
    },
    /// Write the sft or dpo dataset; prints the row count.
    ExportDataset {
        #[arg(long)]
        kind: DatasetKind,
        /// Output file; defaults to exports/<kind>.jsonl in the case store.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score the system against a gold set; prints a metrics table.
    RunBenchmark {
        /// Gold cases as JSON lines.
        #[arg(long)]
        gold: PathBuf,
        /// Case inputs as JSON lines, stored first when not yet known.
        #[arg(long)]
        cases: Option<PathBuf>,
        #[arg(long, conflicts_with = "no_reflection")]
        ablation: Option<Ablation>,
        /// Shorthand for `--ablation no-reflection`.
        #[arg(long)]
        no_reflection: bool,
        /// Also write the full report JSON here.
        #[arg(long)]
        report_out: Option<PathBuf>,
    },
    /// Print a bearer token for the HTTP API.
    MintToken {
        #[arg(long, value_parser = parse_role)]
        role: Role,
        #[arg(long = "as")]
        id: String,
    },
    /// Run the HTTP API.
    Serve {
        /// Overrides the configured listen address.
        #[arg(long)]
        listen: Option<String>,
    },
}

fn parse_decision(s: &str) -> Result<ReviewDecision, String> {
    serde_json::from_value(json!(s)).map_err(|_| format!("expected accepted or rejected, got {s:?}"))
}

fn parse_role(s: &str) -> Result<Role, String> {
    serde_json::from_value(json!(s)).map_err(|_| format!("expected expert or viewer, got {s:?}"))
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn code(&self) -> &str {
        match self {
            CliError::Config(_) => "ConfigError",
            CliError::Engine(e) => e.code(),
            CliError::Input(_) => "InvalidInput",
            CliError::Io(_) => "IoError",
        }
    }

    /// The machine-readable error line printed on stderr.
    pub fn to_json(&self) -> String {
        json!({ "error": self.code(), "message": self.to_string() }).to_string()
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn load_config(g: &GlobalArgs) -> Result<ServiceConfig, CliError> {
    let mut c = ServiceConfig::load(g.config.as_deref())?;
    if let Some(p) = &g.mock_script {
        c.set_mock_script(&p.display().to_string());
    }
    if let Some(b) = &g.backend {
        c.default_backend = Some(b.clone());
    }
    c.validate()?;
    Ok(c)
}

/// Reads a user-named JSON-lines file; unlike store files, it must exist.
fn read_input<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    jsonl::parse_lines(&text, path).map_err(|e| CliError::Input(e.to_string()))
}

fn print_json(v: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn read_case(path_or_id: &str, engine: &Engine, actor: &Actor) -> Result<String, CliError> {
    let path = Path::new(path_or_id);
    if !path.is_file() {
        return Ok(path_or_id.to_string());
    }
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let case = CaseInput::from_json(&text).map_err(EngineError::from)?;
    store_if_new(engine, actor, case)
}

/// Stores a case unless an identical one is already stored.
fn store_if_new(engine: &Engine, actor: &Actor, case: CaseInput) -> Result<String, CliError> {
    match engine.case(&case.case_id) {
        Ok(existing) if existing == case => Ok(case.case_id),
        Ok(_) => Err(EngineError::from(CaseError::DuplicateCase(case.case_id)).into()),
        Err(_) => Ok(engine.submit_case(actor, case)?),
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let config = load_config(&cli.global)?;
    let actor = Actor::expert(&cli.global.actor);
    match cli.command {
        Command::MintToken { role, id } => {
            let secret = std::env::var(&config.auth_token_env)
                .map_err(|_| CliError::Input(format!("{} is not set", config.auth_token_env)))?;
            let who = Actor { id, role };
            println!("{}", auth::mint(secret.as_bytes(), &who));
            Ok(())
        }
        Command::IngestCorpus {
            corpus,
            out,
            no_model_merge,
        } => {
            let gw = config.build_gateway()?;
            let embedder = riskscope_core::kb::HashingEmbedder::new(config.embedding_dimension);
            let docs = load_corpus(&corpus).map_err(|e| CliError::Input(e.to_string()))?;
            let (entries, report) =
                distill_corpus(&gw, &embedder, &docs, !no_model_merge).map_err(|e| CliError::Input(e.to_string()))?;
            jsonl::write_all(&out, &entries).map_err(|e| io_err(&out, e))?;
            print_json(&report);
            Ok(())
        }
        Command::Serve { listen } => {
            let listen = listen.unwrap_or_else(|| config.listen.clone());
            let engine = Arc::new(config.build_engine()?);
            let secret = std::env::var(&config.auth_token_env).ok().filter(|s| !s.is_empty());
            if secret.is_none() {
                tracing::warn!("{} is unset; authentication is off", config.auth_token_env);
            }
            let state = AppState::new(
                engine,
                secret.map(String::into_bytes),
                config.case_store_path.join("exports"),
            );
            let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Io(e.to_string()))?;
            rt.block_on(api::serve(state, &listen))
                .map_err(|e| CliError::Io(format!("{listen}: {e}")))
        }
        cmd => {
            let engine = config.build_engine()?;
            run_engine_command(cmd, &engine, &actor, &config)
        }
    }
}

fn run_engine_command(cmd: Command, engine: &Engine, actor: &Actor, config: &ServiceConfig) -> Result<(), CliError> {
    match cmd {
        Command::BuildKb { candidates } => {
            let entries: Vec<KbEntry> = read_input(&candidates)?;
            let ids = engine.commit_candidates(actor, entries)?;
            print_json(&json!({ "committed": ids.len(), "ids": ids }));
        }
        Command::KbReview { kind, id, status } => print_json(&engine.kb_review(actor, kind, &id, status)?),
        Command::Investigate { case } => {
            let id = read_case(&case, engine, actor)?;
            print_json(&engine.investigate(actor, &id)?);
        }
        Command::Review { report, decision } => {
            let outcome = engine.review(actor, &report, decision)?;
            print_json(&json!({ "report_id": report, "outcome": outcome }));
        }
        Command::Annotate { record } => {
            let text = fs::read_to_string(&record).map_err(|e| io_err(&record, e))?;
            let rec: AnnotationRecord = serde_json::from_str(&text).map_err(|e| io_err(&record, e))?;
            let case_id = rec.case_id.clone();
            engine.annotate(actor, rec)?;
            print_json(&engine.flywheel().annotation(&case_id));
        }
        Command::Cot { case } => print_json(&engine.synthesize_cot(actor, &case)?),
        Command::ExportDataset { kind, out } => {
            let name = match kind {
                DatasetKind::Sft => "sft",
                DatasetKind::Dpo => "dpo",
            };
            let out = out.unwrap_or_else(|| config.export_path(name));
            println!("{}", engine.export_dataset(actor, kind, &out)?);
        }
        Command::RunBenchmark {
            gold,
            cases,
            ablation,
            no_reflection,
            report_out,
        } => {
            if let Some(path) = cases {
                let inputs: Vec<CaseInput> = read_input(&path)?;
                for c in inputs {
                    store_if_new(engine, actor, c)?;
                }
            }
            let gold_cases: Vec<GoldCase> = read_input(&gold)?;
            let ablation = if no_reflection {
                Ablation::NoReflection
            } else {
                ablation.unwrap_or_default()
            };
            let settings = engine.settings();
            let config = BenchmarkConfig {
                ablation,
                term_k: settings.term_k,
                pattern_k: settings.pattern_k,
            };
            let report = engine.run_benchmark(actor, &gold_cases, config)?;
            if let Some(p) = report_out {
                let body = serde_json::to_string_pretty(&report).expect("serializable");
                fs::write(&p, body).map_err(|e| io_err(&p, e))?;
            }
            print!("{}", table_summary(std::slice::from_ref(&report)));
        }
        Command::MintToken { .. } | Command::IngestCorpus { .. } | Command::Serve { .. } => {
            unreachable!("handled by run")
        }
    }
    Ok(())
}
