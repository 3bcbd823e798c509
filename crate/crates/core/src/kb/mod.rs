//! Domain knowledge base: terminology, business logic and risk patterns.
//!
//! Readers take an immutable [`KbState`] snapshot; writers are serialized,
//! build a new state and swap it in atomically, so a retrieval never sees a
//! half-applied mutation. When a directory is configured every mutation is
//! appended to the per-kind JSON-lines file and to `kb_audit.jsonl`.

mod embed;
mod entry;
mod index;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

pub(crate) use embed::fnv1a64;
pub use embed::{cosine, EmbedError, Embedder, HashingEmbedder};
pub use entry::{
    BusinessLogicEntry, Characteristic, EntryKind, KbEntry, MisjudgedPattern, ReviewStatus, RiskPatternEntry, TermEntry,
};
pub use index::{EntryRef, KbIndex};

use crate::jsonl::{self, AppendLog, JsonlError};
use crate::text::{count_token_runs, tokenize};

#[derive(Debug, thiserror::Error)]
pub enum KbError {
    #[error("validation failed: {0}")]
    ValidationFailed(String),
    #[error("{kind:?} {id} not found")]
    NotFound { kind: EntryKind, id: String },
    #[error("storage failure: {0}")]
    StorageFailure(String),
    #[error(transparent)]
    Embedder(#[from] EmbedError),
    #[error("invalid query: {0}")]
    InvalidQuery(String),
}

impl From<JsonlError> for KbError {
    fn from(e: JsonlError) -> Self {
        KbError::StorageFailure(e.to_string())
    }
}

/// Contents of `kb_meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KbMeta {
    pub embedder_id: String,
    pub dimension: usize,
    pub alpha: f64,
}

/// One line of the mutation audit log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KbAuditRecord {
    pub at: DateTime<Utc>,
    pub actor: String,
    pub op: String,
    pub kind: EntryKind,
    pub id: String,
    pub before: Option<KbEntry>,
    pub after: KbEntry,
}

/// An immutable view of the whole knowledge base.
#[derive(Debug, Clone, Default)]
pub struct KbState {
    terms: BTreeMap<String, Arc<TermEntry>>,
    logic: BTreeMap<String, Arc<BusinessLogicEntry>>,
    patterns: BTreeMap<String, Arc<RiskPatternEntry>>,
    index: KbIndex,
    alpha: f64,
}

impl KbState {
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn index(&self) -> &KbIndex {
        &self.index
    }

    pub fn len(&self) -> usize {
        self.terms.len() + self.logic.len() + self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, kind: EntryKind, id: &str) -> Option<KbEntry> {
        match kind {
            EntryKind::Term => self.terms.get(id).map(|e| KbEntry::Term((**e).clone())),
            EntryKind::BusinessLogic => self.logic.get(id).map(|e| KbEntry::BusinessLogic((**e).clone())),
            EntryKind::RiskPattern => self.patterns.get(id).map(|e| KbEntry::RiskPattern((**e).clone())),
        }
    }

    pub fn pattern(&self, id: &str) -> Option<&RiskPatternEntry> {
        self.patterns.get(id).map(|e| &**e)
    }

    /// Entries of `kind` (all kinds when `None`) optionally filtered by
    /// status, ordered by kind then id.
    pub fn entries(&self, kind: Option<EntryKind>, status: Option<ReviewStatus>) -> Vec<KbEntry> {
        let want = |k: EntryKind| kind.is_none_or(|x| x == k);
        let keep = |s: ReviewStatus| status.is_none_or(|x| x == s);
        let mut out = Vec::new();
        if want(EntryKind::Term) {
            out.extend(
                self.terms
                    .values()
                    .filter(|e| keep(e.status))
                    .map(|e| KbEntry::Term((**e).clone())),
            );
        }
        if want(EntryKind::BusinessLogic) {
            out.extend(
                self.logic
                    .values()
                    .filter(|e| keep(e.status))
                    .map(|e| KbEntry::BusinessLogic((**e).clone())),
            );
        }
        if want(EntryKind::RiskPattern) {
            out.extend(
                self.patterns
                    .values()
                    .filter(|e| keep(e.status))
                    .map(|e| KbEntry::RiskPattern((**e).clone())),
            );
        }
        out
    }

    /// Live terms whose surface form occurs in `case_text` as a whole-token
    /// run, most frequent first, ties by term.
    pub fn retrieve_terms(&self, case_text: &str, k: usize) -> Vec<TermEntry> {
        let hay = tokenize(case_text);
        let mut hits: Vec<(usize, &TermEntry)> = self
            .terms
            .values()
            .filter(|e| {
                matches!(
                    e.status,
                    ReviewStatus::Retained | ReviewStatus::Approved | ReviewStatus::Edited
                )
            })
            .filter_map(|e| {
                let n = count_token_runs(&hay, &tokenize(&e.term));
                (n > 0).then_some((n, &**e))
            })
            .collect();
        hits.sort_by(|a, b| {
            b.0.cmp(&a.0)
                .then_with(|| a.1.term.cmp(&b.1.term))
                .then_with(|| a.1.id.cmp(&b.1.id))
        });
        hits.into_iter().take(k).map(|(_, e)| e.clone()).collect()
    }

    /// Live business-logic entries whose scenario key equals `scenario_key`,
    /// ordered by id.
    pub fn retrieve_business_logic(&self, scenario_key: &str) -> Vec<BusinessLogicEntry> {
        self.logic
            .values()
            .filter(|e| e.scenario_key == scenario_key)
            .filter(|e| matches!(e.status, ReviewStatus::Approved | ReviewStatus::Edited))
            .map(|e| (**e).clone())
            .collect()
    }

    /// Top-`k` live patterns for a query by hybrid score.
    pub fn rank_patterns(
        &self,
        query: &str,
        query_embedding: &[f64],
        alpha: f64,
        k: usize,
    ) -> Vec<(RiskPatternEntry, f64)> {
        let tokens: BTreeSet<String> = tokenize(query).into_iter().collect();
        let live = self
            .patterns
            .values()
            .filter(|e| matches!(e.status, ReviewStatus::Approved | ReviewStatus::Edited))
            .map(|e| e.id.as_str());
        self.index
            .hybrid_rank(live, &tokens, query_embedding, alpha)
            .into_iter()
            .take(k)
            .map(|(id, s)| ((*self.patterns[&id]).clone(), s))
            .collect()
    }

    fn put(&mut self, entry: KbEntry) {
        let text = entry.index_text();
        let r = EntryRef::new(entry.kind(), entry.id());
        match entry {
            KbEntry::Term(e) => {
                self.index.insert(r, &text, None);
                self.terms.insert(e.id.clone(), Arc::new(e));
            }
            KbEntry::BusinessLogic(e) => {
                self.index.insert(r, &text, None);
                self.logic.insert(e.id.clone(), Arc::new(e));
            }
            KbEntry::RiskPattern(e) => {
                self.index.insert(r, &text, e.embedding.clone().map(Arc::new));
                self.patterns.insert(e.id.clone(), Arc::new(e));
            }
        }
    }
}

pub struct Kb {
    state: RwLock<Arc<KbState>>,
    writer: Mutex<()>,
    embedder: Arc<dyn Embedder>,
    dir: Option<PathBuf>,
    audit: AppendLog,
}

impl std::fmt::Debug for Kb {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Kb")
            .field("entries", &self.snapshot().len())
            .field("embedder", &self.embedder.id())
            .field("dir", &self.dir)
            .finish()
    }
}

impl Kb {
    pub const DEFAULT_ALPHA: f64 = 0.5;

    pub fn in_memory(embedder: Arc<dyn Embedder>, alpha: f64) -> Self {
        Self {
            state: RwLock::new(Arc::new(KbState {
                alpha: alpha.clamp(0.0, 1.0),
                ..KbState::default()
            })),
            writer: Mutex::new(()),
            embedder,
            dir: None,
            audit: AppendLog::new(None),
        }
    }

    /// Opens (or initializes) a KB directory. An existing `kb_meta.json`
    /// must name the same embedder and dimension; its alpha wins over
    /// `default_alpha`.
    pub fn open(dir: &Path, embedder: Arc<dyn Embedder>, default_alpha: f64) -> Result<Self, KbError> {
        fs::create_dir_all(dir).map_err(|e| KbError::StorageFailure(format!("{}: {e}", dir.display())))?;
        let meta_path = dir.join("kb_meta.json");
        let meta = match fs::read_to_string(&meta_path) {
            Ok(text) => {
                let meta: KbMeta = serde_json::from_str(&text)
                    .map_err(|e| KbError::StorageFailure(format!("{}: {e}", meta_path.display())))?;
                if meta.embedder_id != embedder.id() || meta.dimension != embedder.dimension() {
                    return Err(KbError::ValidationFailed(format!(
                        "knowledge base was built with {} (dim {}), current embedder is {} (dim {})",
                        meta.embedder_id,
                        meta.dimension,
                        embedder.id(),
                        embedder.dimension()
                    )));
                }
                meta
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                let meta = KbMeta {
                    embedder_id: embedder.id().to_string(),
                    dimension: embedder.dimension(),
                    alpha: default_alpha,
                };
                write_meta(&meta_path, &meta)?;
                meta
            }
            Err(e) => return Err(KbError::StorageFailure(format!("{}: {e}", meta_path.display()))),
        };
        if !(0.0..=1.0).contains(&meta.alpha) {
            return Err(KbError::ValidationFailed(format!(
                "alpha {} outside [0, 1]",
                meta.alpha
            )));
        }

        let mut state = KbState {
            alpha: meta.alpha,
            ..KbState::default()
        };
        for kind in EntryKind::ALL {
            let rows: Vec<KbEntry> = jsonl::read_all(&dir.join(kind.file_name()))?;
            // append-only files: the last line per id is current
            let mut latest: BTreeMap<String, KbEntry> = BTreeMap::new();
            for row in rows {
                if row.kind() != kind {
                    return Err(KbError::StorageFailure(format!(
                        "{} holds a {:?} entry",
                        kind.file_name(),
                        row.kind()
                    )));
                }
                latest.insert(row.id().to_string(), row);
            }
            for (_, entry) in latest {
                check_entry(&entry, embedder.dimension())?;
                state.put(entry);
            }
        }
        Ok(Self {
            state: RwLock::new(Arc::new(state)),
            writer: Mutex::new(()),
            embedder,
            dir: Some(dir.to_path_buf()),
            audit: AppendLog::new(Some(dir.join("kb_audit.jsonl"))),
        })
    }

    pub fn snapshot(&self) -> Arc<KbState> {
        self.state.read().clone()
    }

    pub fn embedder(&self) -> &Arc<dyn Embedder> {
        &self.embedder
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn meta(&self) -> KbMeta {
        KbMeta {
            embedder_id: self.embedder.id().to_string(),
            dimension: self.embedder.dimension(),
            alpha: self.snapshot().alpha,
        }
    }

    pub fn embed(&self, text: &str) -> Result<Vec<f64>, KbError> {
        let v = self.embedder.embed(text)?;
        if v.len() != self.embedder.dimension() {
            return Err(KbError::Embedder(EmbedError::Unavailable(format!(
                "embedder returned {} components, expected {}",
                v.len(),
                self.embedder.dimension()
            ))));
        }
        Ok(v)
    }

    /// Inserts or replaces an entry and returns its id. Risk patterns
    /// without an embedding get one computed from name and description.
    /// Replacing an entry must follow the review-status lattice.
    pub fn upsert(&self, entry: KbEntry, actor: &str) -> Result<String, KbError> {
        self.mutate(entry, actor, "upsert")
    }

    /// Moves an entry to a new review status, recording the reviewer.
    pub fn review(&self, kind: EntryKind, id: &str, status: ReviewStatus, reviewer: &str) -> Result<KbEntry, KbError> {
        let current = self.snapshot().get(kind, id).ok_or_else(|| KbError::NotFound {
            kind,
            id: id.to_string(),
        })?;
        let mut next = current;
        match &mut next {
            KbEntry::Term(e) => {
                e.status = status;
                e.reviewer_id = Some(reviewer.to_string());
            }
            KbEntry::BusinessLogic(e) => {
                e.status = status;
                e.reviewer_id = Some(reviewer.to_string());
            }
            KbEntry::RiskPattern(e) => {
                e.status = status;
                e.reviewer_id = Some(reviewer.to_string());
            }
        }
        self.mutate(next.clone(), reviewer, "review")?;
        Ok(self.snapshot().get(kind, id).expect("just written"))
    }

    pub(crate) fn mutate(&self, mut entry: KbEntry, actor: &str, op: &str) -> Result<String, KbError> {
        entry.validate().map_err(KbError::ValidationFailed)?;
        if let KbEntry::RiskPattern(p) = &mut entry {
            if p.embedding.is_none() {
                p.embedding = Some(self.embed(&p.index_text())?);
            }
        }
        check_entry(&entry, self.embedder.dimension())?;

        let _w = self.writer.lock();
        let current = self.snapshot();
        let before = current.get(entry.kind(), entry.id());
        if let Some(prev) = &before {
            if !prev.status().can_transition_to(entry.status()) {
                return Err(KbError::ValidationFailed(format!(
                    "{}: status {} cannot move to {}",
                    entry.id(),
                    prev.status().as_str(),
                    entry.status().as_str()
                )));
            }
        }
        let mut next = (*current).clone();
        next.put(entry.clone());

        if let Some(dir) = &self.dir {
            AppendLog::new(Some(dir.join(entry.kind().file_name()))).append(&entry)?;
        }
        self.audit.append(&KbAuditRecord {
            at: Utc::now(),
            actor: actor.to_string(),
            op: op.to_string(),
            kind: entry.kind(),
            id: entry.id().to_string(),
            before: before.map(strip_embedding),
            after: strip_embedding(entry.clone()),
        })?;
        *self.state.write() = Arc::new(next);
        Ok(entry.id().to_string())
    }

    /// Rewrites the per-kind files with exactly one line per entry.
    pub fn save(&self) -> Result<(), KbError> {
        let Some(dir) = &self.dir else {
            return Err(KbError::StorageFailure(
                "in-memory knowledge base has no directory".into(),
            ));
        };
        let _w = self.writer.lock();
        let state = self.snapshot();
        for kind in EntryKind::ALL {
            jsonl::write_all(&dir.join(kind.file_name()), state.entries(Some(kind), None))?;
        }
        write_meta(&dir.join("kb_meta.json"), &self.meta())
    }

    pub fn audit_log(&self) -> Result<Vec<KbAuditRecord>, KbError> {
        Ok(self.audit.read_all()?)
    }

    /// Hybrid retrieval over live risk patterns. The query is the
    /// newline-joined claim texts.
    pub fn retrieve_risk_patterns<S: AsRef<str>>(
        &self,
        snapshot: &KbState,
        claims: &[S],
        k: usize,
    ) -> Result<Vec<(RiskPatternEntry, f64)>, KbError> {
        if claims.is_empty() {
            return Err(KbError::InvalidQuery("no claims to query with".into()));
        }
        if k == 0 {
            return Err(KbError::InvalidQuery("k must be at least 1".into()));
        }
        let query = claims.iter().map(AsRef::as_ref).collect::<Vec<_>>().join("\n");
        if query.trim().is_empty() {
            return Err(KbError::InvalidQuery("claims are blank".into()));
        }
        let q = self.embed(&query)?;
        Ok(snapshot.rank_patterns(&query, &q, snapshot.alpha, k))
    }
}

fn strip_embedding(mut e: KbEntry) -> KbEntry {
    if let KbEntry::RiskPattern(p) = &mut e {
        p.embedding = None;
    }
    e
}

fn check_entry(entry: &KbEntry, dimension: usize) -> Result<(), KbError> {
    entry.validate().map_err(KbError::ValidationFailed)?;
    if let KbEntry::RiskPattern(p) = entry {
        match &p.embedding {
            Some(v) if v.len() != dimension => {
                return Err(KbError::ValidationFailed(format!(
                    "{}: embedding has {} components, expected {dimension}",
                    p.id,
                    v.len()
                )))
            }
            None if matches!(p.status, ReviewStatus::Approved | ReviewStatus::Edited) => {
                return Err(KbError::ValidationFailed(format!(
                    "{}: reviewed pattern without embedding",
                    p.id
                )))
            }
            _ => {}
        }
    }
    Ok(())
}

fn write_meta(path: &Path, meta: &KbMeta) -> Result<(), KbError> {
    let text = serde_json::to_string_pretty(meta).map_err(|e| KbError::StorageFailure(e.to_string()))?;
    fs::write(path, text).map_err(|e| KbError::StorageFailure(format!("{}: {e}", path.display())))
}
