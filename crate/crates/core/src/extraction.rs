//! Knowledge distillation: corpora and rule code in, candidate KB entries
//! out. Nothing here writes to the knowledge base; [`commit_candidates`] is
//! the one explicit write boundary.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::gateway::{with_fixture_key, Gateway, GatewayError, PromptRequest, TemplateId};
use crate::kb::{
    cosine, BusinessLogicEntry, Characteristic, Embedder, Kb, KbEntry, KbError, MisjudgedPattern, ReviewStatus,
    RiskPatternEntry, TermEntry,
};
use crate::prompts::render;
use crate::text::{extract_json_array, tokenize};

/// Cosine at or above which two risk patterns are merged.
pub const DEFAULT_MERGE_THRESHOLD: f64 = 0.9;

#[derive(Debug, thiserror::Error)]
pub enum ExtractionError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("score for {term:?} is not a lone integer 1-5: {completion:?}")]
    ScoreParseFailed { term: String, completion: String },
    #[error("section parse failed: {0}")]
    SectionParseFailed(String),
    #[error("json parse failed: {0}")]
    JsonParseFailed(String),
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error("corpus: {0}")]
    Corpus(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocKind {
    Sop,
    Manual,
    Report,
    /// Transcribed meeting recordings; audio never enters the pipeline.
    MeetingMinutes,
    CodeFeature,
    CodeModel,
}

impl DocKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DocKind::Sop => "sop",
            DocKind::Manual => "manual",
            DocKind::Report => "report",
            DocKind::MeetingMinutes => "meeting_minutes",
            DocKind::CodeFeature => "code_feature",
            DocKind::CodeModel => "code_model",
        }
    }

    pub fn is_code(self) -> bool {
        matches!(self, DocKind::CodeFeature | DocKind::CodeModel)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusDoc {
    pub id: String,
    pub kind: DocKind,
    pub text: String,
    pub token_count: usize,
}

impl CorpusDoc {
    pub fn new(id: &str, kind: DocKind, text: &str) -> Self {
        Self {
            id: id.to_string(),
            kind,
            text: text.to_string(),
            token_count: tokenize(text).len(),
        }
    }
}

/// One entry of a corpus manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub kind: DocKind,
    /// Scenario the document describes, used to group business-logic
    /// extraction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<String>,
    /// For rule code: the model or strategy the file belongs to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
}

/// `manifest.json`: file name (relative to the corpus directory) → entry.
pub type Manifest = BTreeMap<String, ManifestEntry>;

/// Reads a corpus directory described by `manifest.json`. Documents come
/// back in manifest (file name) order.
pub fn load_corpus(dir: &Path) -> Result<Vec<(CorpusDoc, ManifestEntry)>, ExtractionError> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| ExtractionError::Corpus(format!("{}: {e}", manifest_path.display())))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| ExtractionError::Corpus(format!("{}: {e}", manifest_path.display())))?;
    let mut seen = HashMap::new();
    manifest
        .into_iter()
        .map(|(file, entry)| {
            if let Some(prev) = seen.insert(entry.id.clone(), file.clone()) {
                return Err(ExtractionError::Corpus(format!(
                    "document id {} used by {prev} and {file}",
                    entry.id
                )));
            }
            let path = dir.join(&file);
            let body =
                fs::read_to_string(&path).map_err(|e| ExtractionError::Corpus(format!("{}: {e}", path.display())))?;
            Ok((CorpusDoc::new(&entry.id, entry.kind, &body), entry))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoredTerm {
    pub term: String,
    /// Definition from the source documents.
    pub d_t: String,
    /// The base model's greedy explanation.
    pub e_t: String,
    pub s: u8,
}

/// A document or term whose batch failed, reported next to the partial
/// results.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchFailure {
    pub item: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermExtraction {
    pub candidates: Vec<TermEntry>,
    pub failures: Vec<BatchFailure>,
}

/// Lowercased tokens joined by `_`; stable identifier stem for extracted
/// entries ("Treasure Island" → `treasure_island`).
pub fn slug(text: &str) -> String {
    let s = tokenize(text).join("_");
    if s.is_empty() {
        format!("h{:016x}", crate::kb::fnv1a64(text.as_bytes()))
    } else {
        s
    }
}

fn case_fold(term: &str) -> String {
    term.trim().to_lowercase()
}

fn parse_term_array(text: &str) -> Result<Vec<(String, String)>, ExtractionError> {
    let items = extract_json_array(text)
        .ok_or_else(|| ExtractionError::JsonParseFailed("no JSON array in completion".into()))?;
    items
        .iter()
        .map(|v| {
            let term = v.get("term").and_then(Value::as_str);
            let def = v.get("definition").and_then(Value::as_str);
            match (term, def) {
                (Some(t), Some(d)) if !t.trim().is_empty() => Ok((t.trim().to_string(), d.trim().to_string())),
                _ => Err(ExtractionError::JsonParseFailed(format!(
                    "term object without term/definition: {v}"
                ))),
            }
        })
        .collect()
}

/// Asks the model for the terms each document defines and merges them by
/// case-folded surface form. The first document to define a term supplies
/// its definition; every defining document is listed as a source.
pub fn extract_candidate_terms(gw: &Gateway, docs: &[CorpusDoc]) -> Result<TermExtraction, ExtractionError> {
    if docs.is_empty() {
        return Err(ExtractionError::InvalidInput("no documents".into()));
    }
    let per_doc: Vec<Result<Vec<(String, String)>, ExtractionError>> = docs
        .par_iter()
        .map(|doc| {
            let prompt = render(
                TemplateId::TermExtraction,
                &[("Kind", doc.kind.as_str()), ("Document", &doc.text)],
            );
            let out = gw.complete(&PromptRequest::new(
                TemplateId::TermExtraction,
                with_fixture_key(&prompt, &doc.id),
            ))?;
            parse_term_array(&out.text)
        })
        .collect();

    let mut report = TermExtraction::default();
    let mut by_fold: HashMap<String, usize> = HashMap::new();
    let mut used_ids: HashMap<String, usize> = HashMap::new();
    for (doc, result) in docs.iter().zip(per_doc) {
        let terms = match result {
            Ok(t) => t,
            Err(e) => {
                report.failures.push(BatchFailure {
                    item: doc.id.clone(),
                    error: e.to_string(),
                });
                continue;
            }
        };
        for (term, def) in terms {
            let fold = case_fold(&term);
            match by_fold.get(&fold) {
                Some(&i) => {
                    let c = &mut report.candidates[i];
                    if !c.source_doc_ids.contains(&doc.id) {
                        c.source_doc_ids.push(doc.id.clone());
                    }
                    if c.doc_definition.is_empty() {
                        c.doc_definition = def;
                    }
                }
                None => {
                    let stem = slug(&term);
                    let n = used_ids.entry(stem.clone()).or_default();
                    *n += 1;
                    let id = if *n == 1 { stem } else { format!("{stem}_{n}") };
                    by_fold.insert(fold, report.candidates.len());
                    report.candidates.push(TermEntry {
                        id,
                        term,
                        doc_definition: def,
                        model_explanation: String::new(),
                        similarity_score: None,
                        status: ReviewStatus::Candidate,
                        source_doc_ids: vec![doc.id.clone()],
                        reviewer_id: None,
                    });
                }
            }
        }
    }
    Ok(report)
}

/// Strict score grammar: after trimming whitespace the completion must be
/// exactly one digit 1-5.
pub fn parse_score(completion: &str) -> Option<u8> {
    match completion.trim() {
        s @ ("1" | "2" | "3" | "4" | "5") => s.parse().ok(),
        _ => None,
    }
}

/// Obtains the model's own explanation of the term (greedy), then grades it
/// against the document definition. The explanation and score are written
/// back onto `entry`.
pub fn score_term(gw: &Gateway, entry: &mut TermEntry) -> Result<ScoredTerm, ExtractionError> {
    if entry.doc_definition.trim().is_empty() {
        return Err(ExtractionError::InvalidInput(format!(
            "{}: document definition is empty",
            entry.id
        )));
    }
    let explain = render(TemplateId::TermExplanation, &[("Concept", &entry.term)]);
    let e_t = gw
        .complete(&PromptRequest::new(TemplateId::TermExplanation, with_fixture_key(&explain, &entry.id)).greedy(true))?
        .text
        .trim()
        .to_string();
    let scoring = render(
        TemplateId::ConceptScoring,
        &[
            ("Concept", &entry.term),
            ("Explanation", &entry.doc_definition),
            ("Answer", &e_t),
        ],
    );
    let completion = gw
        .complete(&PromptRequest::new(TemplateId::ConceptScoring, with_fixture_key(&scoring, &entry.id)).greedy(true))?
        .text;
    let s = parse_score(&completion).ok_or_else(|| ExtractionError::ScoreParseFailed {
        term: entry.term.clone(),
        completion: completion.clone(),
    })?;
    entry.model_explanation = e_t.clone();
    entry.similarity_score = Some(s);
    Ok(ScoredTerm {
        term: entry.term.clone(),
        d_t: entry.doc_definition.clone(),
        e_t,
        s,
    })
}

/// Scores every entry in parallel; failures are reported per term and the
/// entry is left unscored.
pub fn score_terms(gw: &Gateway, entries: &mut [TermEntry]) -> Vec<BatchFailure> {
    entries
        .par_iter_mut()
        .filter_map(|e| {
            score_term(gw, e).err().map(|err| BatchFailure {
                item: e.id.clone(),
                error: err.to_string(),
            })
        })
        .collect::<Vec<_>>()
}

/// Keeps the terms the model does not already know: score ≤ 3 is retained
/// for expert attention, 4 and 5 are dropped. Order is preserved on both
/// sides.
pub fn filter_terms(scored: Vec<ScoredTerm>) -> (Vec<ScoredTerm>, Vec<ScoredTerm>) {
    scored.into_iter().partition(|t| t.s <= 3)
}

/// Applies the same criterion to scored entries: S ≤ 3 moves to `retained`;
/// the rest are returned untouched as dropped. Unscored entries are dropped.
pub fn retain_terms(entries: Vec<TermEntry>) -> (Vec<TermEntry>, Vec<TermEntry>) {
    let (mut keep, drop): (Vec<_>, Vec<_>) = entries
        .into_iter()
        .partition(|e| matches!(e.similarity_score, Some(s) if s <= 3));
    for e in &mut keep {
        e.status = ReviewStatus::Retained;
    }
    (keep, drop)
}

fn heading_of(line: &str) -> String {
    line.trim()
        .trim_start_matches('#')
        .trim()
        .trim_matches('*')
        .trim()
        .trim_end_matches(':')
        .trim_matches('*')
        .trim()
        .to_lowercase()
}

fn bullet_of(line: &str) -> Option<&str> {
    let t = line.trim_start();
    ["- ", "* ", "• ", "-\t"]
        .iter()
        .find_map(|p| t.strip_prefix(p))
        .map(str::trim)
        .filter(|b| !b.is_empty() && *b != "...")
}

/// Splits `[Name]: explanation` at the first colon, dropping the bracket
/// and bold markup models like to copy from the format example.
fn split_bullet(b: &str) -> (String, String) {
    let clean = |s: &str| {
        s.trim()
            .trim_matches('*')
            .trim()
            .trim_start_matches('[')
            .trim_end_matches(']')
            .trim()
            .to_string()
    };
    match b.find(':') {
        Some(i) => (clean(&b[..i]), clean(&b[i + 1..])),
        None => (clean(b), String::new()),
    }
}

/// Parses the two bullet sections of a scenario-knowledge completion.
pub fn parse_scenario_sections(text: &str) -> Result<(Vec<Characteristic>, Vec<MisjudgedPattern>), ExtractionError> {
    #[derive(PartialEq)]
    enum Section {
        None,
        Traits,
        Misjudged,
    }
    let mut section = Section::None;
    let (mut saw_traits, mut saw_misjudged) = (false, false);
    let mut traits = Vec::new();
    let mut misjudged = Vec::new();
    for line in text.lines() {
        let h = heading_of(line);
        if h == "characteristics" {
            section = Section::Traits;
            saw_traits = true;
            continue;
        }
        if h == "risk pattern misjudgments" {
            section = Section::Misjudged;
            saw_misjudged = true;
            continue;
        }
        let Some(b) = bullet_of(line) else { continue };
        let (head, tail) = split_bullet(b);
        match section {
            Section::Traits => traits.push(Characteristic {
                feature: head,
                explanation: tail,
            }),
            Section::Misjudged => misjudged.push(MisjudgedPattern {
                pattern: head,
                reason: tail,
            }),
            Section::None => {}
        }
    }
    match (saw_traits, saw_misjudged) {
        (true, true) => Ok((traits, misjudged)),
        (false, _) => Err(ExtractionError::SectionParseFailed(
            "missing \"Characteristics\" heading".into(),
        )),
        (_, false) => Err(ExtractionError::SectionParseFailed(
            "missing \"Risk Pattern Misjudgments\" heading".into(),
        )),
    }
}

/// Extracts scenario characteristics and likely misjudgments for one
/// business scenario.
pub fn extract_business_logic(
    gw: &Gateway,
    scenario_key: &str,
    docs: &[CorpusDoc],
) -> Result<BusinessLogicEntry, ExtractionError> {
    if docs.is_empty() {
        return Err(ExtractionError::InvalidInput("no documents".into()));
    }
    if scenario_key.trim().is_empty() {
        return Err(ExtractionError::InvalidInput("scenario key is empty".into()));
    }
    let documents = docs
        .iter()
        .map(|d| format!("[{}] {}", d.id, d.text))
        .collect::<Vec<_>>()
        .join("\n\n");
    let prompt = render(
        TemplateId::ScenarioKnowledge,
        &[("Scenario", scenario_key), ("Documents", &documents)],
    );
    let out = gw.complete(&PromptRequest::new(
        TemplateId::ScenarioKnowledge,
        with_fixture_key(&prompt, scenario_key),
    ))?;
    let (characteristics, misjudged_patterns) = parse_scenario_sections(&out.text)?;
    let doc_ids: Vec<&str> = docs.iter().map(|d| d.id.as_str()).collect();
    Ok(BusinessLogicEntry {
        id: format!(
            "bl_{}_{:08x}",
            slug(scenario_key),
            crate::kb::fnv1a64(doc_ids.join("\n").as_bytes()) as u32
        ),
        scenario_key: scenario_key.to_string(),
        characteristics,
        misjudged_patterns,
        status: ReviewStatus::Candidate,
        reviewer_id: None,
    })
}

/// Parses a `[{name, desc}, ...]` completion into `(name, desc)` pairs.
pub fn parse_pattern_array(text: &str) -> Result<Vec<(String, String)>, ExtractionError> {
    let items = extract_json_array(text)
        .ok_or_else(|| ExtractionError::JsonParseFailed("no JSON array in completion".into()))?;
    items
        .iter()
        .map(|v| {
            match (
                v.get("name").and_then(Value::as_str),
                v.get("desc").and_then(Value::as_str),
            ) {
                (Some(n), Some(d)) if !n.trim().is_empty() => Ok((n.trim().to_string(), d.trim().to_string())),
                _ => Err(ExtractionError::JsonParseFailed(format!(
                    "pattern object without name/desc: {v}"
                ))),
            }
        })
        .collect()
}

/// Extracts atomic risk patterns from one rule model's feature and
/// discrimination code.
pub fn extract_risk_patterns(
    gw: &Gateway,
    feature_code: &str,
    model_code: &str,
    source_model_id: &str,
) -> Result<Vec<RiskPatternEntry>, ExtractionError> {
    if feature_code.trim().is_empty() || model_code.trim().is_empty() {
        return Err(ExtractionError::InvalidInput("both code snippets are required".into()));
    }
    let prompt = render(
        TemplateId::RiskPatternExtraction,
        &[
            ("Feature Calculation Code", feature_code),
            ("Discrimination Model Code", model_code),
        ],
    );
    let out = gw.complete(&PromptRequest::new(
        TemplateId::RiskPatternExtraction,
        with_fixture_key(&prompt, source_model_id),
    ))?;
    Ok(parse_pattern_array(&out.text)?
        .into_iter()
        .map(|(name, desc)| RiskPatternEntry {
            id: format!("rp_{}", slug(&name)),
            name,
            desc,
            embedding: None,
            source_model_ids: vec![source_model_id.to_string()],
            status: ReviewStatus::Candidate,
            reviewer_id: None,
        })
        .collect())
}

/// Groups of indices whose patterns are connected by cosine ≥ `threshold`,
/// each group sorted, groups ordered by their first member.
pub fn similarity_groups(embeddings: &[Vec<f64>], threshold: f64) -> Vec<Vec<usize>> {
    let n = embeddings.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for i in 0..n {
        for j in i + 1..n {
            if cosine(&embeddings[i], &embeddings[j]) >= threshold {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().push(i);
    }
    groups.into_values().collect()
}

/// Merges near-duplicate patterns extracted from different models.
///
/// Each group collapses onto its member with the longest description (first
/// on ties), which keeps its id and name; source model ids are unioned.
/// With a gateway the descriptions are merged by the model, falling back to
/// the longest one if that call fails. Without a gateway the operation is
/// idempotent.
pub fn consolidate_patterns(
    candidates: Vec<RiskPatternEntry>,
    embedder: &dyn Embedder,
    gw: Option<&Gateway>,
    threshold: f64,
) -> Result<Vec<RiskPatternEntry>, ExtractionError> {
    let embeddings = candidates
        .iter()
        .map(|c| embedder.embed(&c.index_text()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(KbError::from)?;
    let groups = similarity_groups(&embeddings, threshold);
    let mut out = Vec::with_capacity(groups.len());
    for group in groups {
        if group.len() == 1 {
            out.push(candidates[group[0]].clone());
            continue;
        }
        let rep = *group
            .iter()
            .rev()
            .max_by_key(|&&i| candidates[i].desc.chars().count())
            .expect("non-empty group");
        let mut merged = candidates[rep].clone();
        merged.embedding = None;
        merged.source_model_ids.clear();
        for &i in &group {
            for m in &candidates[i].source_model_ids {
                if !merged.source_model_ids.contains(m) {
                    merged.source_model_ids.push(m.clone());
                }
            }
        }
        if let Some(gw) = gw {
            let descs = group
                .iter()
                .map(|&i| format!("- {}", candidates[i].desc))
                .collect::<Vec<_>>()
                .join("\n");
            let prompt = render(
                TemplateId::PatternConsolidation,
                &[("Name", &merged.name), ("Descriptions", &descs)],
            );
            match gw.complete(&PromptRequest::new(
                TemplateId::PatternConsolidation,
                with_fixture_key(&prompt, &merged.id),
            )) {
                Ok(r) => merged.desc = r.text.trim().to_string(),
                Err(e) => tracing::warn!(pattern = %merged.id, error = %e, "description merge failed; keeping longest"),
            }
        }
        out.push(merged);
    }
    Ok(out)
}

/// Writes extracted candidates into the knowledge base.
pub fn commit_candidates(
    kb: &Kb,
    entries: impl IntoIterator<Item = KbEntry>,
    actor: &str,
) -> Result<Vec<String>, ExtractionError> {
    entries
        .into_iter()
        .map(|e| kb.upsert(e, actor).map_err(ExtractionError::from))
        .collect()
}

/// Counts from one [`distill_corpus`] run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistillReport {
    pub documents: usize,
    pub candidate_terms: usize,
    pub retained_terms: usize,
    pub dropped_terms: usize,
    pub business_logic: usize,
    pub risk_patterns_extracted: usize,
    pub risk_patterns_merged: usize,
    pub failures: Vec<BatchFailure>,
}

/// Runs every extractor over a loaded corpus and returns the candidate
/// entries (retained terms, business logic per scenario, consolidated risk
/// patterns) without touching the knowledge base.
///
/// Text documents feed term and business-logic extraction; business logic
/// is grouped by the manifest `scenario`. Code documents are paired by
/// `model_id`, feature code with model code.
pub fn distill_corpus(
    gw: &Gateway,
    embedder: &dyn Embedder,
    corpus: &[(CorpusDoc, ManifestEntry)],
    merge_with_model: bool,
) -> Result<(Vec<KbEntry>, DistillReport), ExtractionError> {
    let mut report = DistillReport {
        documents: corpus.len(),
        ..Default::default()
    };
    let mut entries = Vec::new();
    let text_docs: Vec<CorpusDoc> = corpus
        .iter()
        .filter(|(d, _)| !d.kind.is_code())
        .map(|(d, _)| d.clone())
        .collect();

    if !text_docs.is_empty() {
        let mut terms = extract_candidate_terms(gw, &text_docs)?;
        report.candidate_terms = terms.candidates.len();
        report.failures.append(&mut terms.failures);
        report.failures.extend(score_terms(gw, &mut terms.candidates));
        let (kept, dropped) = retain_terms(terms.candidates);
        report.retained_terms = kept.len();
        report.dropped_terms = dropped.len();
        entries.extend(kept.into_iter().map(KbEntry::Term));
    }

    let mut by_scenario: BTreeMap<&str, Vec<CorpusDoc>> = BTreeMap::new();
    for (d, m) in corpus.iter().filter(|(d, _)| !d.kind.is_code()) {
        if let Some(s) = m.scenario.as_deref() {
            by_scenario.entry(s).or_default().push(d.clone());
        }
    }
    for (scenario, docs) in by_scenario {
        match extract_business_logic(gw, scenario, &docs) {
            Ok(e) => {
                report.business_logic += 1;
                entries.push(KbEntry::BusinessLogic(e));
            }
            Err(e) => report.failures.push(BatchFailure {
                item: scenario.to_string(),
                error: e.to_string(),
            }),
        }
    }

    let mut by_model: BTreeMap<&str, (Vec<&str>, Vec<&str>)> = BTreeMap::new();
    for (d, m) in corpus.iter().filter(|(d, _)| d.kind.is_code()) {
        let model = m.model_id.as_deref().unwrap_or(d.id.as_str());
        let slot = by_model.entry(model).or_default();
        match d.kind {
            DocKind::CodeFeature => slot.0.push(&d.text),
            _ => slot.1.push(&d.text),
        }
    }
    let mut patterns = Vec::new();
    for (model, (features, rules)) in by_model {
        if features.is_empty() || rules.is_empty() {
            report.failures.push(BatchFailure {
                item: model.to_string(),
                error: "needs both feature code and model code".into(),
            });
            continue;
        }
        match extract_risk_patterns(gw, &features.join("\n\n"), &rules.join("\n\n"), model) {
            Ok(mut p) => patterns.append(&mut p),
            Err(e) => report.failures.push(BatchFailure {
                item: model.to_string(),
                error: e.to_string(),
            }),
        }
    }
    report.risk_patterns_extracted = patterns.len();
    let merged = consolidate_patterns(
        patterns,
        embedder,
        merge_with_model.then_some(gw),
        DEFAULT_MERGE_THRESHOLD,
    )?;
    report.risk_patterns_merged = merged.len();
    entries.extend(merged.into_iter().map(KbEntry::RiskPattern));
    Ok((entries, report))
}
