//! One handle over the stores and the module operations, used by the HTTP
//! service and the CLI. Every state change goes through a method here that
//! writes an audit line.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::case_model::{CaseError, CaseInput, CaseStore};
use crate::eval::{run_benchmark, BenchmarkConfig, BenchmarkReport, EvalError, GoldCase};
use crate::flywheel::{
    synthesize_cot, AnnotationRecord, CaseReview, CotSample, Flywheel, FlywheelError, QueueItem, ReviewDecision,
    RouteOutcome,
};
use crate::gateway::{Gateway, GatewayError};
use crate::jsonl::{AppendLog, JsonlError};
use crate::kb::{EntryKind, Kb, KbEntry, KbError, ReviewStatus, RiskPatternEntry};
use crate::pipeline::{generate_initial_analysis, AnalysisDraft, DraftStore, PipelineError, DEFAULT_TERM_K};
use crate::rnr::{
    hotfix_calibrate_pattern, hotfix_upsert_logic, refine, Actor, RefineOptions, RefinedReport, RnrError,
    DEFAULT_PATTERN_K,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineSettings {
    pub term_k: usize,
    pub pattern_k: usize,
}

impl Default for EngineSettings {
    fn default() -> Self {
        Self {
            term_k: DEFAULT_TERM_K,
            pattern_k: DEFAULT_PATTERN_K,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub at: DateTime<Utc>,
    pub actor: String,
    pub op: String,
    pub target: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Sft,
    Dpo,
}

impl std::str::FromStr for DatasetKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sft" => Ok(DatasetKind::Sft),
            "dpo" => Ok(DatasetKind::Dpo),
            _ => Err(format!("unknown dataset kind {s:?}; expected sft or dpo")),
        }
    }
}

/// A window of a deterministically ordered list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Page<T> {
    pub items: Vec<T>,
    pub total: usize,
    pub offset: usize,
    pub limit: usize,
}

impl<T> Page<T> {
    pub fn of(all: Vec<T>, offset: usize, limit: usize) -> Self {
        let total = all.len();
        let items = all.into_iter().skip(offset).take(limit).collect();
        Self {
            items,
            total,
            offset,
            limit,
        }
    }
}

/// Broad failure classes, for mapping onto transport status codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Validation,
    Unauthorized,
    NotFound,
    Conflict,
    Gateway,
    Embedder,
    Internal,
}

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error(transparent)]
    Case(#[from] CaseError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Rnr(#[from] RnrError),
    #[error(transparent)]
    Flywheel(#[from] FlywheelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error("storage failure: {0}")]
    Storage(#[from] JsonlError),
    #[error("{0}")]
    NotFound(String),
    #[error("invalid request: {0}")]
    Invalid(String),
}

fn gateway_class(_: &GatewayError) -> ErrorClass {
    ErrorClass::Gateway
}

fn kb_class(e: &KbError) -> ErrorClass {
    match e {
        KbError::ValidationFailed(_) | KbError::InvalidQuery(_) => ErrorClass::Validation,
        KbError::NotFound { .. } => ErrorClass::NotFound,
        KbError::Embedder(_) => ErrorClass::Embedder,
        KbError::StorageFailure(_) => ErrorClass::Internal,
    }
}

fn case_class(e: &CaseError) -> ErrorClass {
    match e {
        CaseError::ValidationFailed(_) => ErrorClass::Validation,
        CaseError::DuplicateCase(_) => ErrorClass::Conflict,
        CaseError::CaseNotFound(_) => ErrorClass::NotFound,
        CaseError::Storage(_) => ErrorClass::Internal,
    }
}

fn pipeline_class(e: &PipelineError) -> ErrorClass {
    match e {
        PipelineError::Case(c) => case_class(c),
        PipelineError::Gateway(g) => gateway_class(g),
        PipelineError::ClaimParseFailed(_) => ErrorClass::Gateway,
        PipelineError::Storage(_) => ErrorClass::Internal,
    }
}

fn rnr_class(e: &RnrError) -> ErrorClass {
    match e {
        RnrError::InvalidInput(_) => ErrorClass::Validation,
        RnrError::Case(c) => case_class(c),
        RnrError::Gateway(g) => gateway_class(g),
        RnrError::VerdictParseFailed(_) | RnrError::CoverageGap { .. } => ErrorClass::Gateway,
        RnrError::Kb(k) => kb_class(k),
        RnrError::Unauthorized { .. } => ErrorClass::Unauthorized,
        RnrError::PatternNotFound(_) => ErrorClass::NotFound,
        RnrError::Storage(_) => ErrorClass::Internal,
    }
}

impl EngineError {
    pub fn class(&self) -> ErrorClass {
        match self {
            EngineError::Case(e) => case_class(e),
            EngineError::Pipeline(e) => pipeline_class(e),
            EngineError::Rnr(e) => rnr_class(e),
            EngineError::Flywheel(e) => match e {
                FlywheelError::AlreadyReviewed(_) | FlywheelError::NotQueued(_) => ErrorClass::Conflict,
                FlywheelError::ReportNotFound(_) | FlywheelError::NotAnnotated(_) => ErrorClass::NotFound,
                FlywheelError::DispositionIncomplete { .. } | FlywheelError::InvalidRecord(_) => ErrorClass::Validation,
                FlywheelError::Gateway(g) => gateway_class(g),
                FlywheelError::Case(c) => case_class(c),
                FlywheelError::IoFailure(_) => ErrorClass::Internal,
            },
            EngineError::Eval(e) => match e {
                EvalError::InvalidGold(_) | EvalError::InvariantViolation(_) => ErrorClass::Validation,
                EvalError::CaseNotFound(_) => ErrorClass::NotFound,
                EvalError::Case(c) => case_class(c),
                EvalError::Pipeline(p) => pipeline_class(p),
                EvalError::Rnr(r) => rnr_class(r),
                EvalError::JudgeParseFailed(_) | EvalError::CoverageGap { .. } | EvalError::Gateway(_) => {
                    ErrorClass::Gateway
                }
            },
            EngineError::Kb(e) => kb_class(e),
            EngineError::Storage(_) => ErrorClass::Internal,
            EngineError::NotFound(_) => ErrorClass::NotFound,
            EngineError::Invalid(_) => ErrorClass::Validation,
        }
    }

    /// Short machine-readable name of the failure.
    pub fn code(&self) -> &'static str {
        match self {
            EngineError::Case(CaseError::ValidationFailed(_)) => "ValidationFailed",
            EngineError::Case(CaseError::DuplicateCase(_)) => "DuplicateCase",
            EngineError::Case(CaseError::CaseNotFound(_)) => "CaseNotFound",
            EngineError::Pipeline(PipelineError::ClaimParseFailed(_)) => "ClaimParseFailed",
            EngineError::Rnr(RnrError::VerdictParseFailed(_)) => "VerdictParseFailed",
            EngineError::Rnr(RnrError::CoverageGap { .. }) | EngineError::Eval(EvalError::CoverageGap { .. }) => {
                "CoverageGap"
            }
            EngineError::Rnr(RnrError::Unauthorized { .. }) => "Unauthorized",
            EngineError::Rnr(RnrError::PatternNotFound(_)) => "PatternNotFound",
            EngineError::Flywheel(FlywheelError::AlreadyReviewed(_)) => "AlreadyReviewed",
            EngineError::Flywheel(FlywheelError::ReportNotFound(_)) => "ReportNotFound",
            EngineError::Flywheel(FlywheelError::NotQueued(_)) => "NotQueued",
            EngineError::Flywheel(FlywheelError::NotAnnotated(_)) => "NotAnnotated",
            EngineError::Flywheel(FlywheelError::DispositionIncomplete { .. }) => "DispositionIncomplete",
            EngineError::Eval(EvalError::JudgeParseFailed(_)) => "JudgeParseFailed",
            EngineError::Eval(EvalError::InvariantViolation(_)) => "InvariantViolation",
            _ => match self.class() {
                ErrorClass::Validation => "ValidationFailed",
                ErrorClass::Unauthorized => "Unauthorized",
                ErrorClass::NotFound => "NotFound",
                ErrorClass::Conflict => "Conflict",
                ErrorClass::Gateway => "GatewayError",
                ErrorClass::Embedder => "EmbedderUnavailable",
                ErrorClass::Internal => "StorageFailure",
            },
        }
    }
}

pub type EngineResult<T> = Result<T, EngineError>;

pub struct Engine {
    gateway: Arc<Gateway>,
    kb: Arc<Kb>,
    cases: CaseStore,
    drafts: DraftStore,
    reports: crate::rnr::ReportStore,
    flywheel: Flywheel,
    audit: AppendLog,
    audit_mem: Mutex<Vec<AuditRecord>>,
    case_locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    settings: EngineSettings,
    data_dir: Option<PathBuf>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("settings", &self.settings)
            .field("data_dir", &self.data_dir)
            .finish_non_exhaustive()
    }
}

impl Engine {
    pub fn in_memory(gateway: Arc<Gateway>, kb: Arc<Kb>, settings: EngineSettings) -> Self {
        Self {
            gateway,
            kb,
            cases: CaseStore::in_memory(),
            drafts: DraftStore::in_memory(),
            reports: crate::rnr::ReportStore::in_memory(),
            flywheel: Flywheel::in_memory(),
            audit: AppendLog::new(None),
            audit_mem: Mutex::new(Vec::new()),
            case_locks: Mutex::new(HashMap::new()),
            settings,
            data_dir: None,
        }
    }

    /// Opens (or creates) the JSON-lines stores under `data_dir`.
    pub fn open(data_dir: &Path, gateway: Arc<Gateway>, kb: Arc<Kb>, settings: EngineSettings) -> EngineResult<Self> {
        let audit = AppendLog::new(Some(data_dir.join("audit.jsonl")));
        let history = audit.read_all::<AuditRecord>()?;
        Ok(Self {
            gateway,
            kb,
            cases: CaseStore::open(data_dir.join("cases.jsonl"))?,
            drafts: DraftStore::open(data_dir.join("drafts.jsonl"))?,
            reports: crate::rnr::ReportStore::open(data_dir.join("reports.jsonl"))?,
            flywheel: Flywheel::open(data_dir.join("flywheel.jsonl"))?,
            audit,
            audit_mem: Mutex::new(history),
            case_locks: Mutex::new(HashMap::new()),
            settings,
            data_dir: Some(data_dir.to_path_buf()),
        })
    }

    pub fn gateway(&self) -> &Arc<Gateway> {
        &self.gateway
    }

    pub fn kb(&self) -> &Arc<Kb> {
        &self.kb
    }

    pub fn cases(&self) -> &CaseStore {
        &self.cases
    }

    pub fn flywheel(&self) -> &Flywheel {
        &self.flywheel
    }

    pub fn settings(&self) -> EngineSettings {
        self.settings
    }

    pub fn data_dir(&self) -> Option<&Path> {
        self.data_dir.as_deref()
    }

    fn record(&self, actor: &Actor, op: &str, target: &str) -> EngineResult<()> {
        let rec = AuditRecord {
            at: Utc::now(),
            actor: actor.id.clone(),
            op: op.to_string(),
            target: target.to_string(),
        };
        self.audit.append(&rec)?;
        self.audit_mem.lock().push(rec);
        Ok(())
    }

    pub fn audit_log(&self) -> Vec<AuditRecord> {
        self.audit_mem.lock().clone()
    }

    fn case_lock(&self, case_id: &str) -> Arc<Mutex<()>> {
        self.case_locks.lock().entry(case_id.to_string()).or_default().clone()
    }

    pub fn submit_case(&self, actor: &Actor, case: CaseInput) -> EngineResult<String> {
        actor.require_expert("submit cases")?;
        let id = case.case_id.clone();
        self.cases.store_case(case)?;
        self.record(actor, "submit_case", &id)?;
        Ok(id)
    }

    pub fn case(&self, case_id: &str) -> EngineResult<CaseInput> {
        Ok(self.cases.load_case(case_id)?)
    }

    /// Draft then refine. Runs for the same case are serialized.
    pub fn investigate(&self, actor: &Actor, case_id: &str) -> EngineResult<RefinedReport> {
        actor.require_expert("investigate cases")?;
        let lock = self.case_lock(case_id);
        let _guard = lock.lock();
        let case = self.cases.load_case(case_id)?;
        let draft = generate_initial_analysis(
            &self.gateway,
            &self.kb.snapshot(),
            &self.drafts,
            &case,
            self.settings.term_k,
        );
        self.record(actor, "generate_draft", case_id)?;
        let draft = draft?;
        let opts = RefineOptions {
            pattern_k: self.settings.pattern_k,
            ..Default::default()
        };
        let report = refine(&self.gateway, &self.kb, &self.reports, &case, &draft, opts)?;
        self.record(actor, "refine", &report.report_id)?;
        Ok(report)
    }

    pub fn draft(&self, case_id: &str, revision: u64) -> Option<AnalysisDraft> {
        self.drafts.get(case_id, revision)
    }

    pub fn latest_report(&self, case_id: &str) -> EngineResult<RefinedReport> {
        self.reports
            .latest(case_id)
            .ok_or_else(|| EngineError::NotFound(format!("no report for case {case_id}")))
    }

    pub fn report(&self, report_id: &str) -> EngineResult<RefinedReport> {
        self.reports
            .get(report_id)
            .ok_or_else(|| FlywheelError::ReportNotFound(report_id.to_string()).into())
    }

    pub fn review(&self, actor: &Actor, report_id: &str, decision: ReviewDecision) -> EngineResult<RouteOutcome> {
        self.review_at(actor, report_id, decision, Utc::now())
    }

    pub fn review_at(
        &self,
        actor: &Actor,
        report_id: &str,
        decision: ReviewDecision,
        at: DateTime<Utc>,
    ) -> EngineResult<RouteOutcome> {
        actor.require_expert("review reports")?;
        let report = self.report(report_id)?;
        let draft = self
            .drafts
            .get(&report.case_id, report.draft_revision)
            .ok_or_else(|| EngineError::NotFound(format!("draft {} of {}", report.draft_revision, report.case_id)))?;
        let review = CaseReview {
            case_id: report.case_id.clone(),
            report_ref: report.report_id.clone(),
            decision,
            reviewer_id: actor.id.clone(),
            reviewed_at: at,
        };
        let outcome = self
            .flywheel
            .route_review(review, QueueItem::new(&report, &draft, at))?;
        self.record(actor, "review", report_id)?;
        Ok(outcome)
    }

    pub fn annotation_queue(&self, offset: usize, limit: usize) -> Page<QueueItem> {
        Page::of(self.flywheel.queue(), offset, limit)
    }

    pub fn annotate(&self, actor: &Actor, mut record: AnnotationRecord) -> EngineResult<()> {
        actor.require_expert("annotate cases")?;
        if record.annotator_id.trim().is_empty() {
            record.annotator_id = actor.id.clone();
        }
        let case_id = record.case_id.clone();
        self.flywheel.record_annotation(record)?;
        self.record(actor, "annotate", &case_id)
    }

    pub fn synthesize_cot(&self, actor: &Actor, case_id: &str) -> EngineResult<CotSample> {
        actor.require_expert("synthesize CoT samples")?;
        let record = self
            .flywheel
            .annotation(case_id)
            .ok_or_else(|| FlywheelError::NotAnnotated(case_id.to_string()))?;
        let case = self.cases.load_case(case_id)?;
        let sample = synthesize_cot(&self.gateway, &case, &record)?;
        self.flywheel.record_cot(sample.clone())?;
        self.record(actor, "synthesize_cot", case_id)?;
        Ok(sample)
    }

    pub fn kb_entries(
        &self,
        kind: Option<EntryKind>,
        status: Option<ReviewStatus>,
        offset: usize,
        limit: usize,
    ) -> Page<KbEntry> {
        Page::of(self.kb.snapshot().entries(kind, status), offset, limit)
    }

    /// Business-logic entries go in as hotfixes; other kinds are upserted
    /// as given.
    pub fn kb_upsert(&self, actor: &Actor, entry: KbEntry) -> EngineResult<String> {
        actor.require_expert("edit the knowledge base")?;
        let id = match entry {
            KbEntry::BusinessLogic(e) => hotfix_upsert_logic(&self.kb, actor, e)?,
            other => self.kb.upsert(other, &actor.id)?,
        };
        self.record(actor, "kb_upsert", &id)?;
        Ok(id)
    }

    /// The explicit write step after extraction: candidates go into the
    /// knowledge base as given.
    pub fn commit_candidates(&self, actor: &Actor, entries: Vec<KbEntry>) -> EngineResult<Vec<String>> {
        actor.require_expert("build the knowledge base")?;
        let mut ids = Vec::with_capacity(entries.len());
        for e in entries {
            ids.push(self.kb.upsert(e, &actor.id)?);
        }
        self.record(actor, "build_kb", &format!("{} entries", ids.len()))?;
        Ok(ids)
    }

    pub fn kb_review(&self, actor: &Actor, kind: EntryKind, id: &str, status: ReviewStatus) -> EngineResult<KbEntry> {
        actor.require_expert("review knowledge")?;
        let e = self.kb.review(kind, id, status, &actor.id)?;
        self.record(actor, "kb_review", id)?;
        Ok(e)
    }

    pub fn calibrate_pattern(&self, actor: &Actor, pattern_id: &str, desc: &str) -> EngineResult<RiskPatternEntry> {
        let p = hotfix_calibrate_pattern(&self.kb, actor, pattern_id, desc)?;
        self.record(actor, "calibrate_pattern", pattern_id)?;
        Ok(p)
    }

    pub fn acceptance_rate(&self, from: Option<DateTime<Utc>>, to: Option<DateTime<Utc>>) -> Option<f64> {
        self.flywheel.acceptance_rate(from, to)
    }

    pub fn run_benchmark(
        &self,
        actor: &Actor,
        gold: &[GoldCase],
        config: BenchmarkConfig,
    ) -> EngineResult<BenchmarkReport> {
        actor.require_expert("run benchmarks")?;
        if gold.is_empty() {
            return Err(EngineError::Invalid("gold set is empty".into()));
        }
        for g in gold {
            g.validate()?;
        }
        let report = run_benchmark(
            &self.gateway,
            &self.kb,
            gold,
            |id| self.cases.load_case(id).ok(),
            config,
        )?;
        self.record(actor, "run_benchmark", report.label.as_str())?;
        Ok(report)
    }

    pub fn export_dataset(&self, actor: &Actor, kind: DatasetKind, path: &Path) -> EngineResult<usize> {
        actor.require_expert("export datasets")?;
        let n = match kind {
            DatasetKind::Sft => self.flywheel.export_sft(path)?,
            DatasetKind::Dpo => self.flywheel.export_dpo(path)?,
        };
        self.record(actor, "export_dataset", &path.display().to_string())?;
        Ok(n)
    }
}
