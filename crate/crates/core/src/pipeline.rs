//! Step one of an investigation: glossary augmentation, the initial
//! analysis completion, and claim parsing.

use std::collections::HashMap;
use std::path::PathBuf;

use chrono::{DateTime, Utc};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::case_model::{serialize_case, CaseError, CaseInput, SerializedCase};
use crate::gateway::{with_fixture_key, Gateway, GatewayError, PromptRequest, TemplateId};
use crate::jsonl::{AppendLog, JsonlError};
use crate::kb::{KbState, TermEntry};
use crate::prompts::render;
use crate::text::extract_json_array;

pub const DEFAULT_TERM_K: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClaimOrigin {
    ModelInitial,
    RnrAdded,
    ExpertAdded,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RiskClaim {
    pub claim_id: String,
    pub text: String,
    pub origin: ClaimOrigin,
}

impl RiskClaim {
    pub fn new(claim_id: impl Into<String>, text: impl Into<String>, origin: ClaimOrigin) -> Self {
        Self {
            claim_id: claim_id.into(),
            text: text.into(),
            origin,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Case(#[from] CaseError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("claim parse failed: {0}")]
    ClaimParseFailed(String),
    #[error("storage failure: {0}")]
    Storage(#[from] JsonlError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisDraft {
    pub case_id: String,
    /// 1 for the first draft of a case, incremented per regeneration.
    pub revision: u64,
    pub claims: Vec<RiskClaim>,
    pub raw_completion: String,
    /// The exact prompt text sent to the backend.
    pub prompt_snapshot: String,
    /// Ids of the glossary terms placed in the prompt, in rank order.
    #[serde(default)]
    pub term_ids: Vec<String>,
    /// Set when generation failed; the draft is kept so the failure is
    /// visible downstream.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub created_at: DateTime<Utc>,
}

impl AnalysisDraft {
    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }
}

/// Draft log keyed by case id and revision.
#[derive(Debug)]
pub struct DraftStore {
    log: AppendLog,
    drafts: Mutex<HashMap<String, Vec<AnalysisDraft>>>,
}

impl DraftStore {
    pub fn in_memory() -> Self {
        Self {
            log: AppendLog::new(None),
            drafts: Mutex::new(HashMap::new()),
        }
    }

    pub fn open(path: PathBuf) -> Result<Self, JsonlError> {
        let log = AppendLog::new(Some(path));
        let mut drafts: HashMap<String, Vec<AnalysisDraft>> = HashMap::new();
        for d in log.read_all::<AnalysisDraft>()? {
            drafts.entry(d.case_id.clone()).or_default().push(d);
        }
        for v in drafts.values_mut() {
            v.sort_by_key(|d| d.revision);
        }
        Ok(Self {
            log,
            drafts: Mutex::new(drafts),
        })
    }

    /// Assigns the next revision for the case and persists the draft.
    pub fn save(&self, mut draft: AnalysisDraft) -> Result<AnalysisDraft, JsonlError> {
        let mut drafts = self.drafts.lock();
        let history = drafts.entry(draft.case_id.clone()).or_default();
        draft.revision = history.last().map_or(1, |d| d.revision + 1);
        self.log.append(&draft)?;
        history.push(draft.clone());
        Ok(draft)
    }

    pub fn latest(&self, case_id: &str) -> Option<AnalysisDraft> {
        self.drafts.lock().get(case_id).and_then(|v| v.last().cloned())
    }

    pub fn get(&self, case_id: &str, revision: u64) -> Option<AnalysisDraft> {
        self.drafts
            .lock()
            .get(case_id)
            .and_then(|v| v.iter().find(|d| d.revision == revision).cloned())
    }

    pub fn history(&self, case_id: &str) -> Vec<AnalysisDraft> {
        self.drafts.lock().get(case_id).cloned().unwrap_or_default()
    }
}

/// Builds the initial-analysis prompt: instructions, an optional
/// `## Glossary` of `- term: definition` lines in the given order, then the
/// serialized case. The case id rides along as the fixture key.
pub fn augment_prompt(serialized: &SerializedCase, terms: &[TermEntry]) -> String {
    let glossary = if terms.is_empty() {
        String::new()
    } else {
        let mut g = String::from("## Glossary\n");
        for t in terms {
            g.push_str("- ");
            g.push_str(&t.term);
            g.push_str(": ");
            g.push_str(&t.doc_definition.replace('\n', " "));
            g.push('\n');
        }
        g.push('\n');
        g
    };
    let prompt = render(
        TemplateId::InitialAnalysis,
        &[("Glossary", &glossary), ("Case", &serialized.text)],
    );
    with_fixture_key(&prompt, &serialized.case_id)
}

/// Reads the first JSON array of `{"claim": ...}` objects out of a
/// completion, numbering claims `c1..cn` in array order.
pub fn parse_claims(completion: &str) -> Result<Vec<RiskClaim>, PipelineError> {
    let items = extract_json_array(completion)
        .ok_or_else(|| PipelineError::ClaimParseFailed("no JSON array in completion".into()))?;
    items
        .iter()
        .enumerate()
        .map(|(i, v)| match v.get("claim").and_then(Value::as_str).map(str::trim) {
            Some(text) if !text.is_empty() => {
                Ok(RiskClaim::new(format!("c{}", i + 1), text, ClaimOrigin::ModelInitial))
            }
            _ => Err(PipelineError::ClaimParseFailed(format!(
                "element {} has no claim text: {v}",
                i + 1
            ))),
        })
        .collect()
}

/// serialize → retrieve glossary terms → augment → complete → parse. The
/// draft is persisted whether or not generation succeeds; on failure it
/// carries the error and the error is returned.
pub fn generate_initial_analysis(
    gw: &Gateway,
    kb: &KbState,
    drafts: &DraftStore,
    case: &CaseInput,
    term_k: usize,
) -> Result<AnalysisDraft, PipelineError> {
    let serialized = serialize_case(case)?;
    let terms = kb.retrieve_terms(&serialized.text, term_k);
    let prompt = augment_prompt(&serialized, &terms);
    let mut draft = AnalysisDraft {
        case_id: case.case_id.clone(),
        revision: 0,
        claims: Vec::new(),
        raw_completion: String::new(),
        prompt_snapshot: prompt.clone(),
        term_ids: terms.iter().map(|t| t.id.clone()).collect(),
        error: None,
        created_at: Utc::now(),
    };
    let outcome = gw
        .complete(&PromptRequest::new(TemplateId::InitialAnalysis, prompt))
        .map_err(PipelineError::from)
        .and_then(|r| {
            draft.raw_completion = r.text;
            parse_claims(&draft.raw_completion)
        });
    match outcome {
        Ok(claims) => {
            draft.claims = claims;
            Ok(drafts.save(draft)?)
        }
        Err(e) => {
            draft.error = Some(e.to_string());
            drafts.save(draft)?;
            Err(e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::case_model::{Scalar, TextSnippet};
    use crate::gateway::MockBackend;
    use crate::kb::{HashingEmbedder, Kb, KbEntry, ReviewStatus};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn case() -> CaseInput {
        let mut tabular = indexmap::IndexMap::new();
        tabular.insert("orders_7d".to_string(), Scalar::Number(42.into()));
        CaseInput {
            case_id: "case-1".into(),
            scenario_key: "auction".into(),
            tabular,
            triples: vec![],
            texts: vec![TextSnippet {
                source: "chat".into(),
                content: "won three lots on Treasure Island".into(),
            }],
        }
    }

    fn term(id: &str, term: &str, def: &str) -> TermEntry {
        TermEntry {
            id: id.into(),
            term: term.into(),
            doc_definition: def.into(),
            model_explanation: "x".into(),
            similarity_score: Some(2),
            status: ReviewStatus::Retained,
            source_doc_ids: vec!["sop".into()],
            reviewer_id: None,
        }
    }

    #[test]
    fn glossary_layout() {
        let s = serialize_case(&case()).unwrap();
        let p = augment_prompt(&s, &[term("a", "Alpha", "first"), term("b", "Beta", "second")]);
        let g = p.find("## Glossary\n- Alpha: first\n- Beta: second\n").unwrap();
        assert!(g < p.find(&s.text).unwrap());
        let bare = augment_prompt(&s, &[]);
        assert!(!bare.contains("## Glossary"));
        assert!(bare.contains(&s.text));
    }

    #[test]
    fn parse_claims_cases() {
        let c = parse_claims(r#"[{"claim":"x"},{"claim":"y"}]"#).unwrap();
        assert_eq!(
            c.iter().map(|c| c.claim_id.as_str()).collect::<Vec<_>>(),
            vec!["c1", "c2"]
        );
        assert!(c.iter().all(|c| c.origin == ClaimOrigin::ModelInitial));
        let c = parse_claims("Analysis:\n[{\"claim\":\"only\"}]\nThanks").unwrap();
        assert_eq!(c[0].text, "only");
        assert!(parse_claims("[]").unwrap().is_empty());
        assert!(matches!(parse_claims("none"), Err(PipelineError::ClaimParseFailed(_))));
        assert!(matches!(
            parse_claims(r#"[{"claim":""}]"#),
            Err(PipelineError::ClaimParseFailed(_))
        ));
        assert!(matches!(
            parse_claims(r#"[{"text":"x"}]"#),
            Err(PipelineError::ClaimParseFailed(_))
        ));
    }

    fn kb_with_term() -> Kb {
        let kb = Kb::in_memory(Arc::new(HashingEmbedder::default()), 0.5);
        kb.upsert(
            KbEntry::Term(term(
                "treasure_island",
                "Treasure Island",
                "JD.com's auction service rather than a brand name",
            )),
            "t",
        )
        .unwrap();
        kb
    }

    #[test]
    fn draft_generation_and_replay() {
        let mock = MockBackend::default().on(
            TemplateId::InitialAnalysis,
            "case-1",
            r#"[{"claim":"a"},{"claim":"b"},{"claim":"c"}]"#,
        );
        let gw = Gateway::with_mock(mock.clone());
        let kb = kb_with_term();
        let drafts = DraftStore::in_memory();
        let d = generate_initial_analysis(&gw, &kb.snapshot(), &drafts, &case(), DEFAULT_TERM_K).unwrap();
        assert_eq!(d.claims.len(), 3);
        assert_eq!(d.revision, 1);
        assert_eq!(d.term_ids, vec!["treasure_island"]);
        assert!(d
            .prompt_snapshot
            .contains("- Treasure Island: JD.com's auction service rather than a brand name"));
        let replay = gw
            .complete(&PromptRequest::new(
                TemplateId::InitialAnalysis,
                d.prompt_snapshot.clone(),
            ))
            .unwrap();
        assert_eq!(replay.text, d.raw_completion);
        let again = generate_initial_analysis(&gw, &kb.snapshot(), &drafts, &case(), DEFAULT_TERM_K).unwrap();
        assert_eq!(again.revision, 2);
        assert_eq!(drafts.latest("case-1").unwrap().revision, 2);
    }

    #[test]
    fn empty_and_malformed_completions() {
        let kb = kb_with_term();
        let drafts = DraftStore::in_memory();
        let gw = Gateway::with_mock(MockBackend::default().on(TemplateId::InitialAnalysis, "case-1", "[]"));
        let d = generate_initial_analysis(&gw, &kb.snapshot(), &drafts, &case(), 8).unwrap();
        assert!(d.claims.is_empty() && d.is_ok());

        let gw = Gateway::with_mock(MockBackend::default().on(TemplateId::InitialAnalysis, "case-1", "I cannot help"));
        let err = generate_initial_analysis(&gw, &kb.snapshot(), &drafts, &case(), 8).unwrap_err();
        assert!(matches!(err, PipelineError::ClaimParseFailed(_)));
        let stored = drafts.latest("case-1").unwrap();
        assert!(stored.error.unwrap().contains("claim parse failed"));
        assert_eq!(stored.raw_completion, "I cannot help");
    }

    #[test]
    fn store_reload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("drafts.jsonl");
        let kb = kb_with_term();
        let gw =
            Gateway::with_mock(MockBackend::default().on_any_key(TemplateId::InitialAnalysis, r#"[{"claim":"a"}]"#));
        {
            let drafts = DraftStore::open(path.clone()).unwrap();
            generate_initial_analysis(&gw, &kb.snapshot(), &drafts, &case(), 8).unwrap();
            generate_initial_analysis(&gw, &kb.snapshot(), &drafts, &case(), 8).unwrap();
        }
        let drafts = DraftStore::open(path).unwrap();
        assert_eq!(drafts.history("case-1").len(), 2);
        let next = generate_initial_analysis(&gw, &kb.snapshot(), &drafts, &case(), 8).unwrap();
        assert_eq!(next.revision, 3);
    }

    proptest! {
        #[test]
        fn claim_ids_dense_and_stable(texts in proptest::collection::vec("[a-z][a-z ]{0,12}", 0..12)) {
            let arr = serde_json::to_string(&texts.iter().map(|t| serde_json::json!({"claim": t})).collect::<Vec<_>>()).unwrap();
            let a = parse_claims(&format!("prefix {arr} suffix")).unwrap();
            let b = parse_claims(&arr).unwrap();
            prop_assert_eq!(&a, &b);
            for (i, c) in a.iter().enumerate() {
                prop_assert_eq!(&c.claim_id, &format!("c{}", i + 1));
            }
        }

        #[test]
        fn bare_prompt_contains_case_text(content in "[ -~]{1,80}", key in "[a-z_]{1,10}") {
            let mut c = case();
            c.texts[0].content = content;
            c.tabular.insert(key, Scalar::Text("v".into()));
            let s = serialize_case(&c).unwrap();
            prop_assert!(augment_prompt(&s, &[]).contains(&s.text));
        }
    }
}
