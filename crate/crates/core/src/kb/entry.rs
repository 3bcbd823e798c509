use serde::{Deserialize, Serialize};

/// Expert review state shared by every entry kind.
///
/// `candidate → retained → {approved | rejected | edited}`, and an edited
/// entry may later be approved or rejected. Re-writing an entry with its
/// current status is always allowed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewStatus {
    Candidate,
    Retained,
    Approved,
    Rejected,
    Edited,
}

impl ReviewStatus {
    pub fn can_transition_to(self, next: ReviewStatus) -> bool {
        use ReviewStatus::*;
        self == next
            || matches!(
                (self, next),
                (Candidate, Retained) | (Retained, Approved | Rejected | Edited) | (Edited, Approved | Rejected)
            )
    }

    /// Statuses that mark a human sign-off.
    pub fn is_reviewed(self) -> bool {
        matches!(
            self,
            ReviewStatus::Approved | ReviewStatus::Edited | ReviewStatus::Rejected
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ReviewStatus::Candidate => "candidate",
            ReviewStatus::Retained => "retained",
            ReviewStatus::Approved => "approved",
            ReviewStatus::Rejected => "rejected",
            ReviewStatus::Edited => "edited",
        }
    }
}

impl std::str::FromStr for ReviewStatus {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unknown status {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermEntry {
    pub id: String,
    pub term: String,
    /// Definition taken from the source documents.
    pub doc_definition: String,
    /// The base model's own explanation of the term, decoded greedily.
    #[serde(default)]
    pub model_explanation: String,
    /// Agreement between the two definitions, 1..=5.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub similarity_score: Option<u8>,
    pub status: ReviewStatus,
    #[serde(default)]
    pub source_doc_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reviewer_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Characteristic {
    pub feature: String,
    pub explanation: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MisjudgedPattern {
    pub pattern: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BusinessLogicEntry {
    pub id: String,
    pub scenario_key: String,
    #[serde(default)]
    pub characteristics: Vec<Characteristic>,
    #[serde(default)]
    pub misjudged_patterns: Vec<MisjudgedPattern>,
    pub status: ReviewStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reviewer_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskPatternEntry {
    pub id: String,
    pub name: String,
    pub desc: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
    #[serde(default)]
    pub source_model_ids: Vec<String>,
    pub status: ReviewStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reviewer_id: Option<String>,
}

impl RiskPatternEntry {
    /// Text the pattern is embedded and keyword-indexed from.
    pub fn index_text(&self) -> String {
        format!("{}\n{}", self.name, self.desc)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Term,
    BusinessLogic,
    RiskPattern,
}

impl EntryKind {
    pub const ALL: [EntryKind; 3] = [EntryKind::Term, EntryKind::BusinessLogic, EntryKind::RiskPattern];

    pub fn file_name(self) -> &'static str {
        match self {
            EntryKind::Term => "terms.jsonl",
            EntryKind::BusinessLogic => "business_logic.jsonl",
            EntryKind::RiskPattern => "risk_patterns.jsonl",
        }
    }
}

impl std::str::FromStr for EntryKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "term" | "terms" => Ok(EntryKind::Term),
            "business_logic" | "logic" => Ok(EntryKind::BusinessLogic),
            "risk_pattern" | "pattern" | "risk_patterns" => Ok(EntryKind::RiskPattern),
            _ => Err(format!("unknown entry kind {s:?}")),
        }
    }
}

/// Any knowledge-base entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KbEntry {
    Term(TermEntry),
    BusinessLogic(BusinessLogicEntry),
    RiskPattern(RiskPatternEntry),
}

impl KbEntry {
    pub fn id(&self) -> &str {
        match self {
            KbEntry::Term(e) => &e.id,
            KbEntry::BusinessLogic(e) => &e.id,
            KbEntry::RiskPattern(e) => &e.id,
        }
    }

    pub fn kind(&self) -> EntryKind {
        match self {
            KbEntry::Term(_) => EntryKind::Term,
            KbEntry::BusinessLogic(_) => EntryKind::BusinessLogic,
            KbEntry::RiskPattern(_) => EntryKind::RiskPattern,
        }
    }

    pub fn status(&self) -> ReviewStatus {
        match self {
            KbEntry::Term(e) => e.status,
            KbEntry::BusinessLogic(e) => e.status,
            KbEntry::RiskPattern(e) => e.status,
        }
    }

    pub fn reviewer_id(&self) -> Option<&str> {
        match self {
            KbEntry::Term(e) => e.reviewer_id.as_deref(),
            KbEntry::BusinessLogic(e) => e.reviewer_id.as_deref(),
            KbEntry::RiskPattern(e) => e.reviewer_id.as_deref(),
        }
    }

    /// Whether retrieval may surface this entry.
    pub fn is_live(&self) -> bool {
        match self {
            KbEntry::Term(e) => matches!(
                e.status,
                ReviewStatus::Retained | ReviewStatus::Approved | ReviewStatus::Edited
            ),
            _ => matches!(self.status(), ReviewStatus::Approved | ReviewStatus::Edited),
        }
    }

    /// Text fed to the keyword index.
    pub fn index_text(&self) -> String {
        match self {
            KbEntry::Term(e) => format!("{}\n{}", e.term, e.doc_definition),
            KbEntry::BusinessLogic(e) => {
                let mut s = e.scenario_key.clone();
                for c in &e.characteristics {
                    s.push('\n');
                    s.push_str(&c.feature);
                    s.push(' ');
                    s.push_str(&c.explanation);
                }
                for m in &e.misjudged_patterns {
                    s.push('\n');
                    s.push_str(&m.pattern);
                    s.push(' ');
                    s.push_str(&m.reason);
                }
                s
            }
            KbEntry::RiskPattern(e) => e.index_text(),
        }
    }

    /// Type invariants that do not depend on the KB configuration.
    pub fn validate(&self) -> Result<(), String> {
        if self.id().trim().is_empty() {
            return Err("id is empty".into());
        }
        if self.status() == ReviewStatus::Approved && self.reviewer_id().is_none_or(str::is_empty) {
            return Err(format!("{}: approved entries need a reviewer id", self.id()));
        }
        match self {
            KbEntry::Term(e) => {
                if e.term.trim().is_empty() {
                    return Err(format!("{}: term is empty", e.id));
                }
                if let Some(s) = e.similarity_score {
                    if !(1..=5).contains(&s) {
                        return Err(format!("{}: similarity score {s} outside 1..=5", e.id));
                    }
                }
                if e.status == ReviewStatus::Retained && !matches!(e.similarity_score, Some(1..=3)) {
                    return Err(format!("{}: retained terms need a similarity score of at most 3", e.id));
                }
            }
            KbEntry::BusinessLogic(e) => {
                if e.scenario_key.trim().is_empty() {
                    return Err(format!("{}: scenario_key is empty", e.id));
                }
                if e.status != ReviewStatus::Candidate
                    && e.characteristics.is_empty()
                    && e.misjudged_patterns.is_empty()
                {
                    return Err(format!("{}: only candidate entries may carry no knowledge", e.id));
                }
            }
            KbEntry::RiskPattern(e) => {
                if e.name.trim().is_empty() {
                    return Err(format!("{}: name is empty", e.id));
                }
                if let Some(v) = &e.embedding {
                    if v.iter().any(|x| !x.is_finite()) {
                        return Err(format!("{}: embedding has non-finite components", e.id));
                    }
                }
            }
        }
        Ok(())
    }
}
