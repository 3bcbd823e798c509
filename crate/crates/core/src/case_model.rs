//! Multi-modal cases and their Markdown serialization.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use indexmap::IndexMap;
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use crate::jsonl::{AppendLog, JsonlError};

/// A tabular cell value.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Bool(bool),
    Number(serde_json::Number),
    Text(String),
}

impl Scalar {
    /// Rendering used in the `## Order Data` section. Text that could be
    /// mistaken for a number or boolean, or that would break the line
    /// layout, is written as a JSON string literal.
    pub fn render(&self) -> String {
        match self {
            Scalar::Bool(b) => b.to_string(),
            Scalar::Number(n) => n.to_string(),
            Scalar::Text(s) if needs_quoting(s) || looks_like_literal(s) => quote(s),
            Scalar::Text(s) => s.clone(),
        }
    }
}

fn needs_quoting(s: &str) -> bool {
    s.is_empty()
        || s.starts_with('"')
        || s.starts_with(char::is_whitespace)
        || s.ends_with(char::is_whitespace)
        || s.chars().any(char::is_control)
}

fn looks_like_literal(s: &str) -> bool {
    s == "true" || s == "false" || s == "null" || serde_json::from_str::<serde_json::Number>(s).is_ok()
}

fn quote(s: &str) -> String {
    serde_json::to_string(s).expect("string serialization is infallible")
}

fn render_key(k: &str) -> String {
    if needs_quoting(k) || k.contains(':') {
        quote(k)
    } else {
        k.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triple {
    pub src: String,
    pub dst: String,
    pub relation: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextSnippet {
    pub source: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseInput {
    pub case_id: String,
    pub scenario_key: String,
    #[serde(default)]
    pub tabular: IndexMap<String, Scalar>,
    #[serde(default)]
    pub triples: Vec<Triple>,
    #[serde(default)]
    pub texts: Vec<TextSnippet>,
}

#[derive(Debug, thiserror::Error)]
pub enum CaseError {
    #[error("invalid case: {0}")]
    ValidationFailed(String),
    #[error("case {0} already stored")]
    DuplicateCase(String),
    #[error("case {0} not found")]
    CaseNotFound(String),
    #[error("storage failure: {0}")]
    Storage(#[from] JsonlError),
}

impl CaseInput {
    pub fn validate(&self) -> Result<(), CaseError> {
        let fail = |m: String| Err(CaseError::ValidationFailed(m));
        if self.case_id.trim().is_empty() {
            return fail("case_id is empty".into());
        }
        if self.tabular.is_empty() && self.triples.is_empty() && self.texts.is_empty() {
            return fail(format!("{}: every modality is empty", self.case_id));
        }
        if let Some(t) = self
            .triples
            .iter()
            .find(|t| t.src.is_empty() || t.dst.is_empty() || t.relation.is_empty())
        {
            return fail(format!("{}: triple {:?} has an empty field", self.case_id, t));
        }
        Ok(())
    }

    pub fn from_json(json: &str) -> Result<Self, CaseError> {
        let case: CaseInput = serde_json::from_str(json).map_err(|e| CaseError::ValidationFailed(e.to_string()))?;
        case.validate()?;
        Ok(case)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SerializedCase {
    pub case_id: String,
    pub text: String,
    pub char_count: usize,
}

/// Renders a case as Markdown: a header naming the case and scenario, then
/// `## Order Data` (keys sorted), `## Relationship Graph` (input order) and
/// `## Context Text` (input order). Empty sections read `(none)`.
pub fn serialize_case(case: &CaseInput) -> Result<SerializedCase, CaseError> {
    case.validate()?;
    let mut out = String::new();
    let _ = writeln!(out, "# Case: {}", case.case_id);
    let _ = writeln!(out, "Scenario: {}", case.scenario_key);

    out.push_str("\n## Order Data\n");
    if case.tabular.is_empty() {
        out.push_str("(none)\n");
    } else {
        let mut keys: Vec<&String> = case.tabular.keys().collect();
        keys.sort();
        for k in keys {
            let _ = writeln!(out, "- {}: {}", render_key(k), case.tabular[k].render());
        }
    }

    out.push_str("\n## Relationship Graph\n");
    if case.triples.is_empty() {
        out.push_str("(none)\n");
    }
    for t in &case.triples {
        let _ = writeln!(out, "({}, {}, {})", t.src, t.dst, t.relation);
    }

    out.push_str("\n## Context Text\n");
    if case.texts.is_empty() {
        out.push_str("(none)\n");
    }
    for (i, t) in case.texts.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let _ = writeln!(out, "### {}", t.source);
        out.push_str(&t.content);
        if !t.content.ends_with('\n') {
            out.push('\n');
        }
    }

    Ok(SerializedCase {
        case_id: case.case_id.clone(),
        char_count: out.chars().count(),
        text: out,
    })
}

/// Case store: concurrent reads, serialized writes, optional JSON-lines
/// persistence.
#[derive(Debug)]
pub struct CaseStore {
    cases: RwLock<HashMap<String, CaseInput>>,
    log: AppendLog,
}

impl CaseStore {
    pub fn in_memory() -> Self {
        Self {
            cases: RwLock::new(HashMap::new()),
            log: AppendLog::new(None),
        }
    }

    pub fn open(path: PathBuf) -> Result<Self, CaseError> {
        let log = AppendLog::new(Some(path));
        let mut cases = HashMap::new();
        for c in log.read_all::<CaseInput>()? {
            cases.insert(c.case_id.clone(), c);
        }
        Ok(Self {
            cases: RwLock::new(cases),
            log,
        })
    }

    pub fn store_case(&self, case: CaseInput) -> Result<(), CaseError> {
        case.validate()?;
        let mut cases = self.cases.write();
        if cases.contains_key(&case.case_id) {
            return Err(CaseError::DuplicateCase(case.case_id));
        }
        self.log.append(&case)?;
        cases.insert(case.case_id.clone(), case);
        Ok(())
    }

    pub fn load_case(&self, case_id: &str) -> Result<CaseInput, CaseError> {
        self.cases
            .read()
            .get(case_id)
            .cloned()
            .ok_or_else(|| CaseError::CaseNotFound(case_id.to_string()))
    }

    pub fn contains(&self, case_id: &str) -> bool {
        self.cases.read().contains_key(case_id)
    }

    pub fn ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.cases.read().keys().cloned().collect();
        ids.sort();
        ids
    }

    pub fn len(&self) -> usize {
        self.cases.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn case() -> CaseInput {
        CaseInput::from_json(
            r#"{
                "case_id": "c-1",
                "scenario_key": "apparel",
                "tabular": {"b": 2, "a": 1, "user_type": "individual", "vip": true},
                "triples": [{"src": "user_a", "dst": "user_b", "relation": "shipping_phone"}],
                "texts": [{"source": "order note", "content": "please ship fast"}]
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn sections_in_fixed_order_with_sorted_keys() {
        let s = serialize_case(&case()).unwrap();
        let expected = "# Case: c-1\nScenario: apparel\n\n## Order Data\n- a: 1\n- b: 2\n- user_type: individual\n- vip: true\n\n## Relationship Graph\n(user_a, user_b, shipping_phone)\n\n## Context Text\n### order note\nplease ship fast\n";
        assert_eq!(s.text, expected);
        assert_eq!(s.char_count, expected.chars().count());
        assert_eq!(serialize_case(&case()).unwrap(), s);
    }

    #[test]
    fn empty_modalities_render_none() {
        let mut c = case();
        c.triples.clear();
        c.texts.clear();
        let s = serialize_case(&c).unwrap().text;
        assert!(s.contains("## Relationship Graph\n(none)\n"));
        assert!(s.ends_with("## Context Text\n(none)\n"));
    }

    #[test]
    fn ambiguous_text_is_quoted() {
        let mut c = case();
        c.tabular.clear();
        c.tabular.insert("n".into(), Scalar::Text("1".into()));
        c.tabular.insert("m".into(), Scalar::Number(1.into()));
        c.tabular.insert("k: x".into(), Scalar::Text("two\nlines".into()));
        let s = serialize_case(&c).unwrap().text;
        assert!(s.contains("- \"k: x\": \"two\\nlines\"\n- m: 1\n- n: \"1\"\n"));
    }

    #[test]
    fn floats_use_shortest_round_trip_form() {
        let c = CaseInput::from_json(r#"{"case_id":"x","scenario_key":"s","tabular":{"amt":0.1,"big":1e21,"n":-3}}"#)
            .unwrap();
        let s = serialize_case(&c).unwrap().text;
        assert!(s.contains("- amt: 0.1\n"), "{s}");
        assert!(s.contains("- n: -3\n"));
    }

    #[test]
    fn validation_errors() {
        let mut c = case();
        c.tabular.clear();
        c.triples.clear();
        c.texts.clear();
        assert!(matches!(serialize_case(&c), Err(CaseError::ValidationFailed(_))));
        let mut c = case();
        c.triples[0].relation.clear();
        assert!(c.validate().is_err());
        assert!(CaseInput::from_json(
            r#"{"case_id":"x","scenario_key":"s","extra":1,"texts":[{"source":"a","content":"b"}]}"#
        )
        .is_err());
    }

    #[test]
    fn store_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cases.jsonl");
        let store = CaseStore::open(path.clone()).unwrap();
        store.store_case(case()).unwrap();
        assert_eq!(store.load_case("c-1").unwrap(), case());
        assert!(matches!(store.store_case(case()), Err(CaseError::DuplicateCase(_))));
        assert!(matches!(store.load_case("zz"), Err(CaseError::CaseNotFound(_))));
        let reopened = CaseStore::open(path).unwrap();
        assert_eq!(reopened.load_case("c-1").unwrap(), case());
    }

    fn scalar() -> impl Strategy<Value = Scalar> {
        prop_oneof![
            any::<bool>().prop_map(Scalar::Bool),
            any::<i64>().prop_map(|n| Scalar::Number(n.into())),
            (-1e9f64..1e9).prop_map(|f| Scalar::Number(serde_json::Number::from_f64(f).unwrap())),
            ".{0,12}".prop_map(Scalar::Text),
        ]
    }

    fn tabular() -> impl Strategy<Value = IndexMap<String, Scalar>> {
        proptest::collection::vec((".{0,6}", scalar()), 1..5).prop_map(|v| v.into_iter().collect())
    }

    fn order_section(text: &str) -> &str {
        let start = text.find("## Order Data\n").unwrap();
        let end = text.find("\n## Relationship Graph").unwrap();
        &text[start..end]
    }

    proptest! {
        #[test]
        fn tabular_section_is_injective(a in tabular(), b in tabular()) {
            let mk = |t: IndexMap<String, Scalar>| CaseInput {
                case_id: "c".into(), scenario_key: "s".into(), tabular: t, triples: vec![], texts: vec![],
            };
            let (ca, cb) = (mk(a.clone()), mk(b.clone()));
            let (sa, sb) = (serialize_case(&ca).unwrap().text, serialize_case(&cb).unwrap().text);
            if a != b {
                prop_assert_ne!(order_section(&sa), order_section(&sb));
            } else {
                prop_assert_eq!(sa, sb);
            }
        }

        #[test]
        fn every_field_appears(src in "[a-z_]{1,8}", dst in "[a-z_]{1,8}", rel in "[a-z_]{1,8}",
                               source in "[a-z ]{1,10}", content in "[^\r]{1,40}") {
            let c = CaseInput {
                case_id: "c9".into(), scenario_key: "food_delivery".into(), tabular: IndexMap::new(),
                triples: vec![Triple { src: src.clone(), dst: dst.clone(), relation: rel.clone() }],
                texts: vec![TextSnippet { source: source.clone(), content: content.clone() }],
            };
            let s = serialize_case(&c).unwrap().text;
            for f in [&src, &dst, &rel, &source, &content, &c.case_id, &c.scenario_key] {
                prop_assert!(s.contains(f.as_str()));
            }
        }
    }
}
