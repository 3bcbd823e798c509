//! Expert review routing, the annotation queue, suspect-then-rule-out CoT
//! synthesis, SFT/DPO export and the acceptance rate.
//!
//! All state changes go through one event log (`flywheel.jsonl`) that is
//! replayed in order on open.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::case_model::{serialize_case, CaseError, CaseInput};
use crate::gateway::{strip_fixture_key, with_fixture_key, Gateway, GatewayError, PromptRequest, TemplateId};
use crate::jsonl::{self, AppendLog, JsonlError};
use crate::pipeline::{AnalysisDraft, ClaimOrigin, RiskClaim};
use crate::prompts::render;
use crate::rnr::RefinedReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewDecision {
    Accepted,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseReview {
    pub case_id: String,
    pub report_ref: String,
    pub decision: ReviewDecision,
    pub reviewer_id: String,
    pub reviewed_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouteOutcome {
    Finalized,
    QueuedForAnnotation,
}

/// A case waiting for annotation, with what the annotator and the dataset
/// exporters need from its draft and report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueItem {
    pub case_id: String,
    pub report_ref: String,
    pub queued_at: DateTime<Utc>,
    /// Claims the expert must disposition: the draft's claims followed by
    /// claims the refine pass added.
    pub model_claims: Vec<RiskClaim>,
    pub draft_claims: Vec<RiskClaim>,
    pub prompt: String,
    pub draft_completion: String,
}

impl QueueItem {
    pub fn new(report: &RefinedReport, draft: &AnalysisDraft, queued_at: DateTime<Utc>) -> Self {
        let mut model_claims = draft.claims.clone();
        model_claims.extend(
            report
                .final_claims
                .iter()
                .filter(|c| c.origin == ClaimOrigin::RnrAdded)
                .cloned(),
        );
        Self {
            case_id: report.case_id.clone(),
            report_ref: report.report_id.clone(),
            queued_at,
            model_claims,
            draft_claims: draft.claims.clone(),
            prompt: strip_fixture_key(&draft.prompt_snapshot),
            draft_completion: draft.raw_completion.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub case_id: String,
    pub accepted_risks: Vec<RiskClaim>,
    pub rejected_risks: Vec<RiskClaim>,
    #[serde(default)]
    pub expert_additions: Vec<RiskClaim>,
    /// Filled in from the caller when left empty.
    #[serde(default)]
    pub annotator_id: String,
}

impl AnnotationRecord {
    /// Accepted claims then expert additions: the supervised target.
    pub fn confidence_set(&self) -> Vec<&str> {
        self.accepted_risks
            .iter()
            .chain(&self.expert_additions)
            .map(|c| c.text.as_str())
            .collect()
    }

    pub fn rejected_texts(&self) -> Vec<&str> {
        self.rejected_risks.iter().map(|c| c.text.as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CotSample {
    pub case_id: String,
    pub soliloquy: String,
    pub final_section: String,
    pub valid: bool,
    /// The texts the format law is checked against, so validity can be
    /// recomputed from the sample alone.
    pub accepted: Vec<String>,
    pub rejected: Vec<String>,
    pub completion: String,
}

impl CotSample {
    pub fn from_completion(case_id: &str, completion: &str, accepted: Vec<String>, rejected: Vec<String>) -> Self {
        let (soliloquy, final_section) = match split_separator(completion) {
            Some((a, b)) => (a.trim().to_string(), b.trim().to_string()),
            None => (completion.trim().to_string(), String::new()),
        };
        let valid = format_law_holds(completion, &accepted, &rejected);
        Self {
            case_id: case_id.to_string(),
            soliloquy,
            final_section,
            valid,
            accepted,
            rejected,
            completion: completion.to_string(),
        }
    }

    pub fn revalidate(&self) -> bool {
        format_law_holds(&self.completion, &self.accepted, &self.rejected)
    }
}

/// Splits at the single line that reads `---`; `None` unless there is
/// exactly one.
pub fn split_separator(text: &str) -> Option<(&str, &str)> {
    let mut found = None;
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        if line.trim() == "---" {
            if found.is_some() {
                return None;
            }
            found = Some((offset, offset + line.len()));
        }
        offset += line.len();
    }
    found.map(|(start, end)| (&text[..start], &text[end..]))
}

/// The CoT format law: one `---` line with a non-empty soliloquy before it;
/// after it every accepted text appears and no rejected text does.
/// Rejected texts are looked for only outside the accepted mentions, so a
/// rejected claim that is a substring of an accepted one does not count as
/// a leak.
pub fn format_law_holds<S: AsRef<str>>(completion: &str, accepted: &[S], rejected: &[S]) -> bool {
    let Some((soliloquy, tail)) = split_separator(completion) else {
        return false;
    };
    if soliloquy.trim().is_empty() || !accepted.iter().all(|a| tail.contains(a.as_ref())) {
        return false;
    }
    let mut masked = tail.to_string();
    let mut by_len: Vec<&str> = accepted.iter().map(AsRef::as_ref).collect();
    by_len.sort_by_key(|s| std::cmp::Reverse(s.len()));
    for a in by_len.into_iter().filter(|a| !a.is_empty()) {
        masked = masked.replace(a, "\u{0}");
    }
    !rejected.iter().any(|r| masked.contains(r.as_ref()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftRow {
    pub prompt: String,
    pub completion: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DpoRow {
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
}

#[derive(Debug, thiserror::Error)]
pub enum FlywheelError {
    #[error("report {0} already has a terminal review")]
    AlreadyReviewed(String),
    #[error("report {0} not found")]
    ReportNotFound(String),
    #[error("case {0} is not queued for annotation")]
    NotQueued(String),
    #[error("case {0} has no annotation")]
    NotAnnotated(String),
    #[error("claims without a disposition: {missing:?}")]
    DispositionIncomplete { missing: Vec<String> },
    #[error("invalid annotation: {0}")]
    InvalidRecord(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Case(#[from] CaseError),
    #[error("io failure: {0}")]
    IoFailure(#[from] JsonlError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum Event {
    Review {
        review: CaseReview,
    },
    Enqueue {
        item: QueueItem,
    },
    Annotate {
        record: AnnotationRecord,
        at: DateTime<Utc>,
    },
    Cot {
        sample: CotSample,
    },
}

#[derive(Debug, Default)]
struct State {
    reviews: Vec<CaseReview>,
    reviewed: HashSet<String>,
    queue: VecDeque<QueueItem>,
    /// Latest annotation per case with the queue item it resolved.
    annotated: BTreeMap<String, (AnnotationRecord, QueueItem)>,
    cot: HashMap<String, CotSample>,
}

impl State {
    fn apply(&mut self, e: Event) {
        match e {
            Event::Review { review } => {
                self.reviewed.insert(review.report_ref.clone());
                self.reviews.push(review);
            }
            Event::Enqueue { item } => match self.queue.iter_mut().find(|q| q.case_id == item.case_id) {
                Some(q) => *q = item,
                None => self.queue.push_back(item),
            },
            Event::Annotate { record, .. } => {
                if let Some(pos) = self.queue.iter().position(|q| q.case_id == record.case_id) {
                    let item = self.queue.remove(pos).expect("position is valid");
                    self.cot.remove(&record.case_id);
                    self.annotated.insert(record.case_id.clone(), (record, item));
                }
            }
            Event::Cot { sample } => {
                self.cot.insert(sample.case_id.clone(), sample);
            }
        }
    }
}

#[derive(Debug)]
pub struct Flywheel {
    log: AppendLog,
    state: Mutex<State>,
}

impl Flywheel {
    pub fn in_memory() -> Self {
        Self {
            log: AppendLog::new(None),
            state: Mutex::new(State::default()),
        }
    }

    pub fn open(path: PathBuf) -> Result<Self, FlywheelError> {
        let log = AppendLog::new(Some(path));
        let mut state = State::default();
        for e in log.read_all::<Event>()? {
            state.apply(e);
        }
        Ok(Self {
            log,
            state: Mutex::new(state),
        })
    }

    fn commit(&self, state: &mut State, e: Event) -> Result<(), FlywheelError> {
        self.log.append(&e)?;
        state.apply(e);
        Ok(())
    }

    /// Accepted reviews finalize the report; rejected ones put the case on
    /// the annotation queue (once, at its current position if already
    /// there). `item` must describe the reviewed report.
    pub fn route_review(&self, review: CaseReview, item: QueueItem) -> Result<RouteOutcome, FlywheelError> {
        if item.report_ref != review.report_ref || item.case_id != review.case_id {
            return Err(FlywheelError::ReportNotFound(review.report_ref));
        }
        let mut st = self.state.lock();
        if st.reviewed.contains(&review.report_ref) {
            return Err(FlywheelError::AlreadyReviewed(review.report_ref));
        }
        let decision = review.decision;
        self.commit(&mut st, Event::Review { review })?;
        match decision {
            ReviewDecision::Accepted => Ok(RouteOutcome::Finalized),
            ReviewDecision::Rejected => {
                self.commit(&mut st, Event::Enqueue { item })?;
                Ok(RouteOutcome::QueuedForAnnotation)
            }
        }
    }

    pub fn is_reviewed(&self, report_ref: &str) -> bool {
        self.state.lock().reviewed.contains(report_ref)
    }

    pub fn review_of(&self, report_ref: &str) -> Option<CaseReview> {
        self.state
            .lock()
            .reviews
            .iter()
            .find(|r| r.report_ref == report_ref)
            .cloned()
    }

    pub fn reviews(&self) -> Vec<CaseReview> {
        self.state.lock().reviews.clone()
    }

    /// Queue contents in FIFO order.
    pub fn queue(&self) -> Vec<QueueItem> {
        self.state.lock().queue.iter().cloned().collect()
    }

    pub fn queued(&self, case_id: &str) -> Option<QueueItem> {
        self.state.lock().queue.iter().find(|q| q.case_id == case_id).cloned()
    }

    /// Validates the record against the queued claims and dequeues the case.
    pub fn record_annotation(&self, record: AnnotationRecord) -> Result<(), FlywheelError> {
        let mut st = self.state.lock();
        let item = st
            .queue
            .iter()
            .find(|q| q.case_id == record.case_id)
            .ok_or_else(|| FlywheelError::NotQueued(record.case_id.clone()))?;
        validate_record(&record, &item.model_claims)?;
        self.commit(&mut st, Event::Annotate { record, at: Utc::now() })
    }

    pub fn annotation(&self, case_id: &str) -> Option<AnnotationRecord> {
        self.state.lock().annotated.get(case_id).map(|(r, _)| r.clone())
    }

    pub fn annotations(&self) -> Vec<AnnotationRecord> {
        self.state.lock().annotated.values().map(|(r, _)| r.clone()).collect()
    }

    /// Stores a synthesized sample, valid or not, as the case's current one.
    pub fn record_cot(&self, sample: CotSample) -> Result<(), FlywheelError> {
        let mut st = self.state.lock();
        if !st.annotated.contains_key(&sample.case_id) {
            return Err(FlywheelError::NotAnnotated(sample.case_id));
        }
        self.commit(&mut st, Event::Cot { sample })
    }

    pub fn cot(&self, case_id: &str) -> Option<CotSample> {
        self.state.lock().cot.get(case_id).cloned()
    }

    /// One row per annotated case whose current CoT sample is valid. The
    /// completion is the soliloquy, a `---` line, then one `- ` line per
    /// accepted or expert-added risk.
    pub fn sft_rows(&self) -> Vec<SftRow> {
        let st = self.state.lock();
        st.annotated
            .iter()
            .filter_map(|(case_id, (record, item))| {
                let cot = st.cot.get(case_id).filter(|c| c.valid)?;
                let finals: String = record.confidence_set().iter().map(|t| format!("- {t}\n")).collect();
                Some(SftRow {
                    prompt: item.prompt.clone(),
                    completion: format!("{}\n---\n{finals}", cot.soliloquy),
                })
            })
            .collect()
    }

    /// One row per annotated case whose draft contained a rejected claim:
    /// chosen is the confidence set as a claim array, rejected the draft
    /// completion as generated.
    pub fn dpo_rows(&self) -> Vec<DpoRow> {
        let st = self.state.lock();
        st.annotated
            .values()
            .filter(|(record, item)| {
                let rejected: HashSet<&str> = record.rejected_risks.iter().map(|c| c.claim_id.as_str()).collect();
                item.draft_claims.iter().any(|c| rejected.contains(c.claim_id.as_str()))
            })
            .map(|(record, item)| DpoRow {
                prompt: item.prompt.clone(),
                chosen: claims_array(&record.confidence_set()),
                rejected: item.draft_completion.clone(),
            })
            .collect()
    }

    pub fn export_sft(&self, path: &Path) -> Result<usize, FlywheelError> {
        Ok(jsonl::write_all(path, self.sft_rows())?)
    }

    pub fn export_dpo(&self, path: &Path) -> Result<usize, FlywheelError> {
        Ok(jsonl::write_all(path, self.dpo_rows())?)
    }

    /// Accepted ÷ terminal reviews with `from <= reviewed_at < to`; `None`
    /// when the window holds no review.
    pub fn acceptance_rate(&self, from: Option<DateTime<Utc>>, to: Option<DateTime<Utc>>) -> Option<f64> {
        acceptance_rate(&self.state.lock().reviews, from, to)
    }
}

pub fn acceptance_rate(reviews: &[CaseReview], from: Option<DateTime<Utc>>, to: Option<DateTime<Utc>>) -> Option<f64> {
    let in_window = reviews
        .iter()
        .filter(|r| from.is_none_or(|f| r.reviewed_at >= f) && to.is_none_or(|t| r.reviewed_at < t));
    let (mut accepted, mut total) = (0u64, 0u64);
    for r in in_window {
        total += 1;
        if r.decision == ReviewDecision::Accepted {
            accepted += 1;
        }
    }
    (total > 0).then(|| accepted as f64 / total as f64)
}

/// `[{"claim": ...}, ...]`, the same shape the initial analysis produces.
pub fn claims_array(texts: &[&str]) -> String {
    let items: Vec<serde_json::Value> = texts.iter().map(|t| serde_json::json!({ "claim": t })).collect();
    serde_json::to_string(&items).expect("json values serialize")
}

fn validate_record(record: &AnnotationRecord, model_claims: &[RiskClaim]) -> Result<(), FlywheelError> {
    let bad = |m: String| Err(FlywheelError::InvalidRecord(m));
    if record.annotator_id.trim().is_empty() {
        return bad("annotator_id is empty".into());
    }
    let known: HashMap<&str, &RiskClaim> = model_claims.iter().map(|c| (c.claim_id.as_str(), c)).collect();
    let mut seen: HashSet<&str> = HashSet::new();
    for c in record.accepted_risks.iter().chain(&record.rejected_risks) {
        if !known.contains_key(c.claim_id.as_str()) {
            return bad(format!("{} is not a claim of the reviewed report", c.claim_id));
        }
        if !seen.insert(&c.claim_id) {
            return bad(format!("{} dispositioned more than once", c.claim_id));
        }
        if c.text.trim().is_empty() {
            return bad(format!("{} has empty text", c.claim_id));
        }
    }
    let missing: Vec<String> = model_claims
        .iter()
        .filter(|c| !seen.contains(c.claim_id.as_str()))
        .map(|c| c.claim_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(FlywheelError::DispositionIncomplete { missing });
    }
    for a in &record.expert_additions {
        if a.origin != ClaimOrigin::ExpertAdded {
            return bad(format!("addition {} must have origin expert_added", a.claim_id));
        }
        if a.text.trim().is_empty() {
            return bad(format!("addition {} has empty text", a.claim_id));
        }
        if known.contains_key(a.claim_id.as_str()) {
            return bad(format!("addition id {} collides with a model claim", a.claim_id));
        }
    }
    let rejected: HashSet<&str> = record.rejected_texts().into_iter().collect();
    if let Some(t) = record.confidence_set().into_iter().find(|t| rejected.contains(t)) {
        return bad(format!("{t:?} is both kept and rejected"));
    }
    Ok(())
}

/// Asks the model to reconstruct a suspect-then-rule-out soliloquy for an
/// annotated case and checks it against the format law.
pub fn synthesize_cot(gw: &Gateway, case: &CaseInput, record: &AnnotationRecord) -> Result<CotSample, FlywheelError> {
    if case.case_id != record.case_id {
        return Err(FlywheelError::InvalidRecord(format!(
            "annotation is for {}, case is {}",
            record.case_id, case.case_id
        )));
    }
    let serialized = serialize_case(case)?;
    let accepted: Vec<String> = record.confidence_set().into_iter().map(str::to_string).collect();
    let rejected: Vec<String> = record.rejected_texts().into_iter().map(str::to_string).collect();
    let json = |v: &[String]| serde_json::to_string(v).expect("strings serialize");
    let prompt = render(
        TemplateId::SuspectThenRuleOut,
        &[
            ("Raw Data", &serialized.text),
            ("Accepted Risks Json", &json(&accepted)),
            ("Rejected Risks Json", &json(&rejected)),
        ],
    );
    let out = gw.complete(&PromptRequest::new(
        TemplateId::SuspectThenRuleOut,
        with_fixture_key(&prompt, &case.case_id),
    ))?;
    Ok(CotSample::from_completion(&case.case_id, &out.text, accepted, rejected))
}
