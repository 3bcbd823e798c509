//! Reflect and refine: fact verification against the case data, then a
//! knowledge check of the surviving claims against business logic and risk
//! patterns, merged into the final claim list. Also the expert hotfix entry
//! points that change what the next refine sees.

use std::collections::{HashMap, HashSet};
use std::path::PathBuf;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::case_model::{serialize_case, CaseError, CaseInput, SerializedCase};
use crate::gateway::{with_fixture_key, Gateway, GatewayError, PromptRequest, TemplateId};
use crate::jsonl::{AppendLog, JsonlError};
use crate::kb::{BusinessLogicEntry, Kb, KbEntry, KbError, KbState, ReviewStatus, RiskPatternEntry};
use crate::pipeline::{AnalysisDraft, ClaimOrigin, RiskClaim};
use crate::prompts::render;
use crate::text::extract_json_array;

pub const DEFAULT_PATTERN_K: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Retain,
    Discard,
    Added,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub claim: String,
    pub decision: Decision,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinedReport {
    pub report_id: String,
    pub case_id: String,
    pub draft_revision: u64,
    pub final_claims: Vec<RiskClaim>,
    pub fact_verdicts: Vec<Verdict>,
    pub knowledge_verdicts: Vec<Verdict>,
    pub retrieved_logic_ids: Vec<String>,
    pub retrieved_pattern_ids: Vec<String>,
    pub knowledge_mode: KnowledgeMode,
    /// Verifier completions exactly as returned, for audit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fact_completion: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knowledge_completion: Option<String>,
}

/// Where the knowledge check gets its knowledge from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnowledgeMode {
    /// Business logic by scenario; patterns queried with the fact-checked
    /// claims.
    #[default]
    Targeted,
    /// Patterns queried with the serialized case instead of the claims.
    NonTargeted,
    /// Reflection runs with no knowledge at all.
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefineOptions {
    pub pattern_k: usize,
    pub knowledge: KnowledgeMode,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self {
            pattern_k: DEFAULT_PATTERN_K,
            knowledge: KnowledgeMode::Targeted,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RnrError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Case(#[from] CaseError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("verdict parse failed: {0}")]
    VerdictParseFailed(String),
    #[error("no verdict for claims: {missing:?}")]
    CoverageGap { missing: Vec<String> },
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error("{actor} is not authorized to {op}")]
    Unauthorized { actor: String, op: String },
    #[error("risk pattern {0} not found")]
    PatternNotFound(String),
    #[error("storage failure: {0}")]
    Storage(#[from] JsonlError),
}

fn norm(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn parse_decision(s: &str) -> Option<Decision> {
    match s.trim().to_ascii_lowercase().as_str() {
        "retain" => Some(Decision::Retain),
        "discard" => Some(Decision::Discard),
        "added" => Some(Decision::Added),
        _ => None,
    }
}

/// Parses the first JSON array of `{claim, decision, reason}` objects.
/// `added` is accepted only when `allow_added` is set.
pub fn parse_verdicts(completion: &str, allow_added: bool) -> Result<Vec<Verdict>, RnrError> {
    let items = extract_json_array(completion)
        .ok_or_else(|| RnrError::VerdictParseFailed("no JSON array in completion".into()))?;
    items
        .iter()
        .map(|v| {
            let field = |k: &str| {
                v.get(k)
                    .and_then(Value::as_str)
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
            };
            let (Some(claim), Some(decision), Some(reason)) = (field("claim"), field("decision"), field("reason"))
            else {
                return Err(RnrError::VerdictParseFailed(format!(
                    "verdict missing claim/decision/reason: {v}"
                )));
            };
            let decision = parse_decision(decision)
                .filter(|d| allow_added || *d != Decision::Added)
                .ok_or_else(|| RnrError::VerdictParseFailed(format!("decision {decision:?} not allowed here")))?;
            Ok(Verdict {
                claim: claim.to_string(),
                decision,
                reason: reason.to_string(),
            })
        })
        .collect()
}

/// Matches parsed verdicts to `claims` by whitespace-normalized text. The
/// result holds one retain/discard verdict per claim in claim order, then
/// any added verdicts in completion order.
fn align(claims: &[RiskClaim], parsed: Vec<Verdict>) -> Result<Vec<Verdict>, RnrError> {
    let known: HashSet<String> = claims.iter().map(|c| norm(&c.text)).collect();
    let mut judged: HashMap<String, Verdict> = HashMap::new();
    let mut added = Vec::new();
    let mut added_seen = HashSet::new();
    for v in parsed {
        let key = norm(&v.claim);
        if v.decision == Decision::Added {
            if known.contains(&key) {
                return Err(RnrError::VerdictParseFailed(format!(
                    "added claim repeats an input claim: {:?}",
                    v.claim
                )));
            }
            if added_seen.insert(key) {
                added.push(v);
            }
            continue;
        }
        if !known.contains(&key) {
            return Err(RnrError::VerdictParseFailed(format!(
                "verdict for unknown claim {:?}",
                v.claim
            )));
        }
        match judged.get(&key) {
            Some(prev) if prev.decision != v.decision => {
                return Err(RnrError::VerdictParseFailed(format!(
                    "conflicting verdicts for {:?}",
                    v.claim
                )));
            }
            Some(_) => {}
            None => {
                judged.insert(key, v);
            }
        }
    }
    let mut missing = Vec::new();
    let mut out = Vec::with_capacity(claims.len() + added.len());
    for c in claims {
        match judged.get(&norm(&c.text)) {
            Some(v) => out.push(Verdict {
                claim: c.text.clone(),
                ..v.clone()
            }),
            None => missing.push(c.claim_id.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(RnrError::CoverageGap { missing });
    }
    out.extend(added);
    Ok(out)
}

fn claims_json(claims: &[RiskClaim]) -> String {
    serde_json::to_string(&claims.iter().map(|c| c.text.as_str()).collect::<Vec<_>>()).expect("strings serialize")
}

/// Checks each claim against the serialized case; one retain or discard
/// verdict per claim.
pub fn fact_verify(gw: &Gateway, serialized: &SerializedCase, claims: &[RiskClaim]) -> Result<Vec<Verdict>, RnrError> {
    fact_verify_raw(gw, serialized, claims).map(|(v, _)| v)
}

fn fact_verify_raw(
    gw: &Gateway,
    serialized: &SerializedCase,
    claims: &[RiskClaim],
) -> Result<(Vec<Verdict>, String), RnrError> {
    if claims.is_empty() {
        return Err(RnrError::InvalidInput(
            "fact verification needs at least one claim".into(),
        ));
    }
    let prompt = render(
        TemplateId::FactVerification,
        &[("Data", &serialized.text), ("Claims", &claims_json(claims))],
    );
    let out = gw.complete(&PromptRequest::new(
        TemplateId::FactVerification,
        with_fixture_key(&prompt, &serialized.case_id),
    ))?;
    let verdicts = align(claims, parse_verdicts(&out.text, false)?)?;
    Ok((verdicts, out.text))
}

/// Renders business-logic entries for the knowledge-check prompt, each
/// headed by its id so verdict reasons can cite it.
pub fn render_logic(logic: &[BusinessLogicEntry]) -> String {
    if logic.is_empty() {
        return "(none)".into();
    }
    let mut s = String::new();
    for e in logic {
        s.push_str(&format!(
            "\n[{}] scenario {}\n  Characteristics:\n",
            e.id, e.scenario_key
        ));
        for c in &e.characteristics {
            s.push_str(&format!("  - {}: {}\n", c.feature, c.explanation));
        }
        s.push_str("  Risk Pattern Misjudgments:\n");
        for m in &e.misjudged_patterns {
            s.push_str(&format!("  - {}: {}\n", m.pattern, m.reason));
        }
    }
    s
}

pub fn render_patterns(patterns: &[(RiskPatternEntry, f64)]) -> String {
    if patterns.is_empty() {
        return "(none)".into();
    }
    patterns
        .iter()
        .map(|(p, _)| format!("\n[{}] {}: {}", p.id, p.name, p.desc))
        .collect()
}

/// Cross-checks fact-retained claims against knowledge: retain or discard
/// per claim, plus zero or more added claims.
pub fn knowledge_check(
    gw: &Gateway,
    case_id: &str,
    claims: &[RiskClaim],
    logic: &[BusinessLogicEntry],
    patterns: &[(RiskPatternEntry, f64)],
) -> Result<Vec<Verdict>, RnrError> {
    knowledge_check_raw(gw, case_id, claims, logic, patterns).map(|(v, _)| v)
}

fn knowledge_check_raw(
    gw: &Gateway,
    case_id: &str,
    claims: &[RiskClaim],
    logic: &[BusinessLogicEntry],
    patterns: &[(RiskPatternEntry, f64)],
) -> Result<(Vec<Verdict>, String), RnrError> {
    if claims.is_empty() {
        return Err(RnrError::InvalidInput(
            "knowledge check needs at least one claim".into(),
        ));
    }
    let prompt = render(
        TemplateId::KnowledgeCheck,
        &[
            ("Claims", &claims_json(claims)),
            ("Business Logic Knowledge", &render_logic(logic)),
            ("Risk Pattern Knowledge", &render_patterns(patterns)),
        ],
    );
    let out = gw.complete(&PromptRequest::new(
        TemplateId::KnowledgeCheck,
        with_fixture_key(&prompt, case_id),
    ))?;
    let verdicts = align(claims, parse_verdicts(&out.text, true)?)?;
    Ok((verdicts, out.text))
}

/// The merge law: a draft claim survives iff both passes retained it; every
/// added claim is appended (ids `r1..`, origin rnr_added). Claims without a
/// knowledge verdict count as not retained.
pub fn merge_verdicts(claims: &[RiskClaim], fact: &[Verdict], knowledge: &[Verdict]) -> Vec<RiskClaim> {
    let decided = |vs: &[Verdict], d: Decision| -> HashSet<String> {
        vs.iter().filter(|v| v.decision == d).map(|v| norm(&v.claim)).collect()
    };
    let fact_kept = decided(fact, Decision::Retain);
    let knowledge_kept = decided(knowledge, Decision::Retain);
    let mut out: Vec<RiskClaim> = claims
        .iter()
        .filter(|c| {
            let k = norm(&c.text);
            fact_kept.contains(&k) && knowledge_kept.contains(&k)
        })
        .cloned()
        .collect();
    out.extend(
        knowledge
            .iter()
            .filter(|v| v.decision == Decision::Added)
            .enumerate()
            .map(|(i, v)| RiskClaim::new(format!("r{}", i + 1), v.claim.clone(), ClaimOrigin::RnrAdded)),
    );
    out
}

/// Persisted reports; the latest report per case is the current one.
#[derive(Debug)]
pub struct ReportStore {
    log: AppendLog,
    inner: Mutex<ReportIndex>,
}

#[derive(Debug, Default)]
struct ReportIndex {
    by_id: HashMap<String, RefinedReport>,
    latest: HashMap<String, String>,
    counts: HashMap<String, u64>,
}

impl ReportIndex {
    fn insert(&mut self, r: RefinedReport) {
        *self.counts.entry(r.case_id.clone()).or_default() += 1;
        self.latest.insert(r.case_id.clone(), r.report_id.clone());
        self.by_id.insert(r.report_id.clone(), r);
    }
}

impl ReportStore {
    pub fn in_memory() -> Self {
        Self {
            log: AppendLog::new(None),
            inner: Mutex::new(ReportIndex::default()),
        }
    }

    pub fn open(path: PathBuf) -> Result<Self, JsonlError> {
        let log = AppendLog::new(Some(path));
        let mut idx = ReportIndex::default();
        for r in log.read_all::<RefinedReport>()? {
            idx.insert(r);
        }
        Ok(Self {
            log,
            inner: Mutex::new(idx),
        })
    }

    /// Assigns the report id (`<case_id>.r<n>`) and persists the report.
    pub fn save(&self, mut report: RefinedReport) -> Result<RefinedReport, JsonlError> {
        let mut idx = self.inner.lock();
        let n = idx.counts.get(&report.case_id).copied().unwrap_or(0) + 1;
        report.report_id = format!("{}.r{n}", report.case_id);
        self.log.append(&report)?;
        idx.insert(report.clone());
        Ok(report)
    }

    pub fn get(&self, report_id: &str) -> Option<RefinedReport> {
        self.inner.lock().by_id.get(report_id).cloned()
    }

    pub fn latest(&self, case_id: &str) -> Option<RefinedReport> {
        let idx = self.inner.lock();
        idx.latest.get(case_id).and_then(|id| idx.by_id.get(id)).cloned()
    }

    pub fn all(&self) -> Vec<RefinedReport> {
        let mut v: Vec<RefinedReport> = self.inner.lock().by_id.values().cloned().collect();
        v.sort_by(|a, b| a.report_id.cmp(&b.report_id));
        v
    }
}

/// Runs verify → retrieve → check → merge without persisting. Knowledge is
/// read from one snapshot taken at the start.
pub fn refine_report(
    gw: &Gateway,
    kb: &Kb,
    case: &CaseInput,
    draft: &AnalysisDraft,
    opts: RefineOptions,
) -> Result<RefinedReport, RnrError> {
    if draft.case_id != case.case_id {
        return Err(RnrError::InvalidInput(format!(
            "draft belongs to {}, not {}",
            draft.case_id, case.case_id
        )));
    }
    if let Some(e) = &draft.error {
        return Err(RnrError::InvalidInput(format!("draft {} failed: {e}", draft.revision)));
    }
    let snapshot = kb.snapshot();
    let serialized = serialize_case(case)?;
    let mut report = RefinedReport {
        report_id: String::new(),
        case_id: case.case_id.clone(),
        draft_revision: draft.revision,
        final_claims: Vec::new(),
        fact_verdicts: Vec::new(),
        knowledge_verdicts: Vec::new(),
        retrieved_logic_ids: Vec::new(),
        retrieved_pattern_ids: Vec::new(),
        knowledge_mode: opts.knowledge,
        fact_completion: None,
        knowledge_completion: None,
    };
    if draft.claims.is_empty() {
        return Ok(report);
    }
    let (fact, fact_raw) = fact_verify_raw(gw, &serialized, &draft.claims)?;
    report.fact_completion = Some(fact_raw);
    let survivors: Vec<RiskClaim> = draft
        .claims
        .iter()
        .zip(&fact)
        .filter(|(_, v)| v.decision == Decision::Retain)
        .map(|(c, _)| c.clone())
        .collect();
    report.fact_verdicts = fact;
    if survivors.is_empty() {
        return Ok(report);
    }
    let (logic, patterns) = retrieve_knowledge(kb, &snapshot, case, &serialized, &survivors, opts)?;
    let (knowledge, knowledge_raw) = knowledge_check_raw(gw, &case.case_id, &survivors, &logic, &patterns)?;
    report.retrieved_logic_ids = logic.iter().map(|e| e.id.clone()).collect();
    report.retrieved_pattern_ids = patterns.iter().map(|(p, _)| p.id.clone()).collect();
    report.knowledge_completion = Some(knowledge_raw);
    report.final_claims = merge_verdicts(&draft.claims, &report.fact_verdicts, &knowledge);
    report.knowledge_verdicts = knowledge;
    Ok(report)
}

type Knowledge = (Vec<BusinessLogicEntry>, Vec<(RiskPatternEntry, f64)>);

fn retrieve_knowledge(
    kb: &Kb,
    snapshot: &KbState,
    case: &CaseInput,
    serialized: &SerializedCase,
    survivors: &[RiskClaim],
    opts: RefineOptions,
) -> Result<Knowledge, RnrError> {
    if opts.knowledge == KnowledgeMode::Empty || opts.pattern_k == 0 {
        let logic = match opts.knowledge {
            KnowledgeMode::Empty => Vec::new(),
            _ => snapshot.retrieve_business_logic(&case.scenario_key),
        };
        return Ok((logic, Vec::new()));
    }
    let logic = snapshot.retrieve_business_logic(&case.scenario_key);
    let patterns = match opts.knowledge {
        KnowledgeMode::Targeted => {
            let texts: Vec<&str> = survivors.iter().map(|c| c.text.as_str()).collect();
            kb.retrieve_risk_patterns(snapshot, &texts, opts.pattern_k)?
        }
        _ => kb.retrieve_risk_patterns(snapshot, &[serialized.text.as_str()], opts.pattern_k)?,
    };
    Ok((logic, patterns))
}

/// [`refine_report`], then persist. Nothing is written if any step fails.
pub fn refine(
    gw: &Gateway,
    kb: &Kb,
    reports: &ReportStore,
    case: &CaseInput,
    draft: &AnalysisDraft,
    opts: RefineOptions,
) -> Result<RefinedReport, RnrError> {
    let report = refine_report(gw, kb, case, draft, opts)?;
    Ok(reports.save(report)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Expert,
    Viewer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Actor {
    pub id: String,
    pub role: Role,
}

impl Actor {
    pub fn expert(id: &str) -> Self {
        Self {
            id: id.to_string(),
            role: Role::Expert,
        }
    }

    pub fn viewer(id: &str) -> Self {
        Self {
            id: id.to_string(),
            role: Role::Viewer,
        }
    }

    pub fn require_expert(&self, op: &str) -> Result<(), RnrError> {
        match self.role {
            Role::Expert => Ok(()),
            Role::Viewer => Err(RnrError::Unauthorized {
                actor: self.id.clone(),
                op: op.to_string(),
            }),
        }
    }
}

/// Adds or replaces a business-logic entry as live knowledge. Unreviewed
/// entries are approved under the expert's name. One KB audit record is
/// written.
pub fn hotfix_upsert_logic(kb: &Kb, actor: &Actor, mut entry: BusinessLogicEntry) -> Result<String, RnrError> {
    actor.require_expert("hotfix business logic")?;
    if !entry.status.is_reviewed() {
        entry.status = ReviewStatus::Approved;
    }
    entry.reviewer_id = Some(actor.id.clone());
    Ok(kb.upsert(KbEntry::BusinessLogic(entry), &actor.id)?)
}

/// Replaces a risk pattern's description (typically a threshold) and
/// re-embeds it. One KB audit record is written.
pub fn hotfix_calibrate_pattern(
    kb: &Kb,
    actor: &Actor,
    pattern_id: &str,
    new_desc: &str,
) -> Result<RiskPatternEntry, RnrError> {
    actor.require_expert("calibrate risk pattern")?;
    if new_desc.trim().is_empty() {
        return Err(RnrError::InvalidInput("description is empty".into()));
    }
    let snapshot = kb.snapshot();
    let mut p = snapshot
        .pattern(pattern_id)
        .cloned()
        .ok_or_else(|| RnrError::PatternNotFound(pattern_id.to_string()))?;
    p.desc = new_desc.to_string();
    p.embedding = None;
    if p.status == ReviewStatus::Retained {
        p.status = ReviewStatus::Edited;
    }
    if p.status.is_reviewed() {
        p.reviewer_id = Some(actor.id.clone());
    }
    kb.mutate(KbEntry::RiskPattern(p), &actor.id, "calibrate")?;
    let after = kb.snapshot();
    Ok(after.pattern(pattern_id).cloned().expect("just written"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::case_model::Scalar;
    use crate::gateway::MockBackend;
    use crate::kb::{Characteristic, HashingEmbedder, MisjudgedPattern};
    use std::sync::Arc;

    fn claims(texts: &[&str]) -> Vec<RiskClaim> {
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| RiskClaim::new(format!("c{}", i + 1), *t, ClaimOrigin::ModelInitial))
            .collect()
    }

    fn v(claim: &str, d: Decision) -> Verdict {
        Verdict {
            claim: claim.into(),
            decision: d,
            reason: "r".into(),
        }
    }

    fn verdict_json(vs: &[(&str, &str)]) -> String {
        serde_json::to_string(
            &vs.iter()
                .map(|(c, d)| serde_json::json!({"claim": c, "decision": d, "reason": format!("because {c}")}))
                .collect::<Vec<_>>(),
        )
        .unwrap()
    }

    fn case() -> CaseInput {
        let mut tabular = indexmap::IndexMap::new();
        tabular.insert("orders_7d".to_string(), Scalar::Number(20.into()));
        CaseInput {
            case_id: "k1".into(),
            scenario_key: "food_delivery".into(),
            tabular,
            triples: vec![],
            texts: vec![],
        }
    }

    fn draft(texts: &[&str]) -> AnalysisDraft {
        AnalysisDraft {
            case_id: "k1".into(),
            revision: 1,
            claims: claims(texts),
            raw_completion: String::new(),
            prompt_snapshot: String::new(),
            term_ids: vec![],
            error: None,
            created_at: chrono::Utc::now(),
        }
    }

    #[test]
    fn verdict_grammar() {
        let p = parse_verdicts(&verdict_json(&[("a", "retain"), ("b", "Discard")]), false).unwrap();
        assert_eq!(p[1].decision, Decision::Discard);
        assert!(parse_verdicts(&verdict_json(&[("a", "added")]), false).is_err());
        assert!(parse_verdicts(&verdict_json(&[("a", "added")]), true).is_ok());
        assert!(parse_verdicts(&verdict_json(&[("a", "keep")]), true).is_err());
        assert!(parse_verdicts(r#"[{"claim":"a","decision":"retain","reason":""}]"#, true).is_err());
        assert!(parse_verdicts("nothing", true).is_err());
    }

    #[test]
    fn fact_verify_matches_script_and_detects_gaps() {
        let s = serialize_case(&case()).unwrap();
        let cs = claims(&["shares merchant address", "Treasure Island brand hoarding"]);
        let gw = Gateway::with_mock(MockBackend::default().on(
            TemplateId::FactVerification,
            "k1",
            &verdict_json(&[
                ("Treasure Island brand hoarding", "discard"),
                ("shares merchant address", "retain"),
            ]),
        ));
        let out = fact_verify(&gw, &s, &cs).unwrap();
        assert_eq!(out[0].claim, "shares merchant address");
        assert_eq!(out[0].decision, Decision::Retain);
        assert_eq!(out[1].decision, Decision::Discard);

        let three = claims(&["shares merchant address", "Treasure Island brand hoarding", "third"]);
        match fact_verify(&gw, &s, &three) {
            Err(RnrError::CoverageGap { missing }) => assert_eq!(missing, vec!["c3"]),
            other => panic!("{other:?}"),
        }
        let silent = Gateway::with_mock(MockBackend::default());
        assert!(matches!(fact_verify(&silent, &s, &[]), Err(RnrError::InvalidInput(_))));
    }

    #[test]
    fn unknown_claim_is_a_parse_failure() {
        let s = serialize_case(&case()).unwrap();
        let gw = Gateway::with_mock(MockBackend::default().on_any_key(
            TemplateId::FactVerification,
            &verdict_json(&[("a", "retain"), ("zzz", "retain")]),
        ));
        assert!(matches!(
            fact_verify(&gw, &s, &claims(&["a"])),
            Err(RnrError::VerdictParseFailed(_))
        ));
    }

    #[test]
    fn merge_law_example() {
        let cs = claims(&["c1", "c2", "c3"]);
        let fact = vec![
            v("c1", Decision::Retain),
            v("c2", Decision::Discard),
            v("c3", Decision::Retain),
        ];
        let knowledge = vec![
            v("c1", Decision::Retain),
            v("c3", Decision::Discard),
            v("c4", Decision::Added),
        ];
        let out = merge_verdicts(&cs, &fact, &knowledge);
        assert_eq!(
            out.iter().map(|c| c.text.as_str()).collect::<Vec<_>>(),
            vec!["c1", "c4"]
        );
        assert_eq!(out[1].origin, ClaimOrigin::RnrAdded);
        assert_eq!(out[1].claim_id, "r1");
    }

    fn kb() -> Kb {
        Kb::in_memory(Arc::new(HashingEmbedder::default()), 0.5)
    }

    fn logic() -> BusinessLogicEntry {
        BusinessLogicEntry {
            id: "bl_food".into(),
            scenario_key: "food_delivery".into(),
            characteristics: vec![Characteristic {
                feature: "in-store wifi".into(),
                explanation: "customers share the restaurant network".into(),
            }],
            misjudged_patterns: vec![MisjudgedPattern {
                pattern: "IP clustering".into(),
                reason: "shared restaurant wifi".into(),
            }],
            status: ReviewStatus::Candidate,
            reviewer_id: None,
        }
    }

    #[test]
    fn refine_end_to_end_and_persistence() {
        let kb = kb();
        hotfix_upsert_logic(&kb, &Actor::expert("e1"), logic()).unwrap();
        let d = draft(&["20 delivery orders share IP", "new account"]);
        let gw = Gateway::with_mock(
            MockBackend::default()
                .on(
                    TemplateId::FactVerification,
                    "k1",
                    &verdict_json(&[("20 delivery orders share IP", "retain"), ("new account", "retain")]),
                )
                .on_when(
                    TemplateId::KnowledgeCheck,
                    "k1",
                    &["[bl_food]"],
                    &verdict_json(&[
                        ("20 delivery orders share IP", "discard"),
                        ("new account", "retain"),
                        ("unverified device", "added"),
                    ]),
                ),
        );
        let reports = ReportStore::in_memory();
        let r = refine(&gw, &kb, &reports, &case(), &d, RefineOptions::default()).unwrap();
        assert_eq!(r.report_id, "k1.r1");
        assert_eq!(r.retrieved_logic_ids, vec!["bl_food"]);
        assert_eq!(
            r.final_claims.iter().map(|c| c.text.as_str()).collect::<Vec<_>>(),
            vec!["new account", "unverified device"]
        );
        assert_eq!(reports.latest("k1").unwrap(), r);
    }

    #[test]
    fn failure_persists_nothing() {
        let kb = kb();
        let d = draft(&["a", "b"]);
        let gw = Gateway::with_mock(
            MockBackend::default()
                .on_any_key(
                    TemplateId::FactVerification,
                    &verdict_json(&[("a", "retain"), ("b", "retain")]),
                )
                .on_any_key(TemplateId::KnowledgeCheck, &verdict_json(&[("a", "retain")])),
        );
        let reports = ReportStore::in_memory();
        assert!(matches!(
            refine(&gw, &kb, &reports, &case(), &d, RefineOptions::default()),
            Err(RnrError::CoverageGap { .. })
        ));
        assert!(reports.latest("k1").is_none());
    }

    #[test]
    fn all_discarded_skips_knowledge() {
        let kb = kb();
        let d = draft(&["a"]);
        let gw = Gateway::with_mock(
            MockBackend::default().on_any_key(TemplateId::FactVerification, &verdict_json(&[("a", "discard")])),
        );
        let r = refine_report(&gw, &kb, &case(), &d, RefineOptions::default()).unwrap();
        assert!(r.final_claims.is_empty() && r.knowledge_verdicts.is_empty());
        let empty = refine_report(&gw, &kb, &case(), &draft(&[]), RefineOptions::default()).unwrap();
        assert!(empty.fact_verdicts.is_empty());
    }

    fn pattern() -> RiskPatternEntry {
        RiskPatternEntry {
            id: "rp_hflv".into(),
            name: "High-frequency low-value".into(),
            desc: "count > 20/week AND average amount < 50".into(),
            embedding: None,
            source_model_ids: vec!["m".into()],
            status: ReviewStatus::Approved,
            reviewer_id: Some("e".into()),
        }
    }

    #[test]
    fn calibration_flips_next_refine() {
        let dir = tempfile::tempdir().unwrap();
        let kb = Kb::open(dir.path(), Arc::new(HashingEmbedder::default()), 0.5).unwrap();
        kb.upsert(KbEntry::RiskPattern(pattern()), "seed").unwrap();
        let d = draft(&["20 orders per week at low value"]);
        let gw = Gateway::with_mock(
            MockBackend::default()
                .on_any_key(
                    TemplateId::FactVerification,
                    &verdict_json(&[("20 orders per week at low value", "retain")]),
                )
                .on_when(
                    TemplateId::KnowledgeCheck,
                    "k1",
                    &["count > 10/week"],
                    &verdict_json(&[("20 orders per week at low value", "retain")]),
                )
                .on(
                    TemplateId::KnowledgeCheck,
                    "k1",
                    &verdict_json(&[("20 orders per week at low value", "discard")]),
                ),
        );
        let before = refine_report(&gw, &kb, &case(), &d, RefineOptions::default()).unwrap();
        assert!(before.final_claims.is_empty());
        assert_eq!(before.retrieved_pattern_ids, vec!["rp_hflv"]);
        let audit_before = kb.audit_log().unwrap().len();
        let p = hotfix_calibrate_pattern(
            &kb,
            &Actor::expert("e2"),
            "rp_hflv",
            "count > 10/week AND average amount < 50",
        )
        .unwrap();
        assert_eq!(p.reviewer_id.as_deref(), Some("e2"));
        let after = refine_report(&gw, &kb, &case(), &d, RefineOptions::default()).unwrap();
        assert_eq!(after.final_claims.len(), 1);
        assert_eq!(kb.audit_log().unwrap().len(), audit_before + 1);
    }

    #[test]
    fn hotfix_guards() {
        let kb = kb();
        assert!(matches!(
            hotfix_calibrate_pattern(&kb, &Actor::expert("e"), "nope", "x"),
            Err(RnrError::PatternNotFound(_))
        ));
        assert!(matches!(
            hotfix_calibrate_pattern(&kb, &Actor::viewer("v"), "nope", "x"),
            Err(RnrError::Unauthorized { .. })
        ));
        assert!(matches!(
            hotfix_upsert_logic(&kb, &Actor::viewer("v"), logic()),
            Err(RnrError::Unauthorized { .. })
        ));
        kb.upsert(KbEntry::RiskPattern(pattern()), "seed").unwrap();
        assert!(matches!(
            hotfix_calibrate_pattern(&kb, &Actor::expert("e"), "rp_hflv", "  "),
            Err(RnrError::InvalidInput(_))
        ));
    }

    #[test]
    fn non_targeted_and_empty_modes() {
        let kb = kb();
        kb.upsert(KbEntry::RiskPattern(pattern()), "seed").unwrap();
        hotfix_upsert_logic(&kb, &Actor::expert("e1"), logic()).unwrap();
        let d = draft(&["a"]);
        let gw = Gateway::with_mock(
            MockBackend::default()
                .on_any_key(TemplateId::FactVerification, &verdict_json(&[("a", "retain")]))
                .on_any_key(TemplateId::KnowledgeCheck, &verdict_json(&[("a", "retain")])),
        );
        let empty = refine_report(
            &gw,
            &kb,
            &case(),
            &d,
            RefineOptions {
                knowledge: KnowledgeMode::Empty,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(empty.retrieved_logic_ids.is_empty() && empty.retrieved_pattern_ids.is_empty());
        let nt = refine_report(
            &gw,
            &kb,
            &case(),
            &d,
            RefineOptions {
                knowledge: KnowledgeMode::NonTargeted,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(nt.retrieved_pattern_ids, vec!["rp_hflv"]);
        assert_eq!(nt.knowledge_mode, KnowledgeMode::NonTargeted);
    }
}
