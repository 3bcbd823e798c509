//! Corpus directory → candidate entries → knowledge base → retrieval.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use riskscope_core::extraction::{commit_candidates, distill_corpus, load_corpus, ExtractionError};
use riskscope_core::gateway::{Gateway, MockBackend, TemplateId};
use riskscope_core::kb::{EntryKind, HashingEmbedder, Kb, KbEntry, ReviewStatus};
use serde_json::json;

fn write_corpus(dir: &Path) {
    let manifest = json!({
        "sop_mall.md": { "id": "sop_mall", "kind": "sop", "scenario": "mall_general" },
        "minutes_0903.md": { "id": "minutes_0903", "kind": "meeting_minutes", "scenario": "mall_general" },
        "m1_features.py": { "id": "m1_feat", "kind": "code_feature", "model_id": "m_addr" },
        "m1_model.py": { "id": "m1_model", "kind": "code_model", "model_id": "m_addr" },
        "m2_features.py": { "id": "m2_feat", "kind": "code_feature", "model_id": "m_merchant" },
        "m2_model.py": { "id": "m2_model", "kind": "code_model", "model_id": "m_merchant" },
        "orphan.py": { "id": "orphan", "kind": "code_model", "model_id": "m_orphan" },
    });
    fs::write(dir.join("manifest.json"), manifest.to_string()).unwrap();
    let files = [
        (
            "sop_mall.md",
            "Treasure Island is the self-operated premium channel. GMV counts paid orders.",
        ),
        (
            "minutes_0903.md",
            "Bulk buying on Treasure Island during the Sept 3 promotion is expected.",
        ),
        (
            "m1_features.py",
            "addr_match = order.delivery_address == merchant.registered_address",
        ),
        ("m1_model.py", "if addr_match: flag('self_transaction')"),
        ("m2_features.py", "same_addr = buyer.address == merchant.address"),
        (
            "m2_model.py",
            "if same_addr and order.amount > 100: flag('self_transaction')",
        ),
        ("orphan.py", "flag('nothing')"),
    ];
    for (name, body) in files {
        fs::write(dir.join(name), body).unwrap();
    }
}

const SELF_TRANSACTION: &str =
    r#"[{"name": "Self transaction", "desc": "delivery address matches the merchant registered address"}]"#;

fn gateway() -> Gateway {
    Gateway::with_mock(
        MockBackend::default()
            .on(
                TemplateId::TermExtraction,
                "sop_mall",
                r#"[{"term": "Treasure Island", "definition": "the self-operated premium channel"}, {"term": "GMV", "definition": "gross merchandise value"}]"#,
            )
            .on(TemplateId::TermExtraction, "minutes_0903", r#"[{"term": "treasure island", "definition": "promotion channel"}]"#)
            .on_any_key(TemplateId::TermExplanation, "A guess at what the term means.")
            // low similarity: the base model does not know the term, so it is kept
            .on(TemplateId::ConceptScoring, "treasure_island", "2")
            .on(TemplateId::ConceptScoring, "gmv", "5")
            .on(
                TemplateId::ScenarioKnowledge,
                "mall_general",
                "## Characteristics\n- Promotion bulk buying: expected on Treasure Island\n\
                 ## Risk Pattern Misjudgments\n- Address clustering: office pickup points are shared",
            )
            .on(TemplateId::RiskPatternExtraction, "m_addr", SELF_TRANSACTION)
            .on(TemplateId::RiskPatternExtraction, "m_merchant", SELF_TRANSACTION)
            .on(
                TemplateId::PatternConsolidation,
                "rp_self_transaction",
                "buyer delivery address equals the merchant registered address",
            ),
    )
}

#[test]
fn corpus_distills_into_retrievable_knowledge() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path());
    let docs = load_corpus(dir.path()).unwrap();
    assert_eq!(docs.len(), 7);

    let embedder = HashingEmbedder::default();
    let gw = gateway();
    let (entries, report) = distill_corpus(&gw, &embedder, &docs, true).unwrap();
    assert_eq!(
        (report.candidate_terms, report.retained_terms, report.dropped_terms),
        (2, 1, 1)
    );
    assert_eq!(
        (
            report.business_logic,
            report.risk_patterns_extracted,
            report.risk_patterns_merged
        ),
        (1, 2, 1)
    );
    // the orphan model has no feature code
    assert_eq!(report.failures.len(), 1);
    assert_eq!(report.failures[0].item, "m_orphan");

    let pattern = entries
        .iter()
        .find_map(|e| match e {
            KbEntry::RiskPattern(p) => Some(p.clone()),
            _ => None,
        })
        .unwrap();
    assert_eq!(pattern.source_model_ids, ["m_addr", "m_merchant"]);
    assert_eq!(
        pattern.desc,
        "buyer delivery address equals the merchant registered address"
    );

    let kb = Kb::open(&dir.path().join("kb"), Arc::new(HashingEmbedder::default()), 0.5).unwrap();
    commit_candidates(&kb, entries, "ingest").unwrap();
    // retained terms are live immediately; the rest waits for review
    let snap = kb.snapshot();
    assert_eq!(snap.retrieve_terms("Bought on treasure island twice", 5).len(), 1);
    assert!(snap.retrieve_business_logic("mall_general").is_empty());
    let logic_id = snap.entries(Some(EntryKind::BusinessLogic), None)[0].id().to_string();
    // approval never skips the retained step
    assert!(kb
        .review(
            EntryKind::RiskPattern,
            "rp_self_transaction",
            ReviewStatus::Approved,
            "expert"
        )
        .is_err());
    for (kind, id) in [
        (EntryKind::BusinessLogic, logic_id.as_str()),
        (EntryKind::RiskPattern, "rp_self_transaction"),
    ] {
        kb.review(kind, id, ReviewStatus::Retained, "expert").unwrap();
        kb.review(kind, id, ReviewStatus::Approved, "expert").unwrap();
    }

    let reopened = Kb::open(&dir.path().join("kb"), Arc::new(HashingEmbedder::default()), 0.5).unwrap();
    let snap = reopened.snapshot();
    assert_eq!(snap.retrieve_business_logic("mall_general").len(), 1);
    let hits = reopened
        .retrieve_risk_patterns(&snap, &["delivery address equals merchant address"], 3)
        .unwrap();
    assert_eq!(hits[0].0.id, "rp_self_transaction");
    // three commits and four reviews
    assert_eq!(reopened.audit_log().unwrap().len(), 7);
}

#[test]
fn duplicate_document_ids_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = json!({
        "a.md": { "id": "same", "kind": "sop" },
        "b.md": { "id": "same", "kind": "manual" },
    });
    fs::write(dir.path().join("manifest.json"), manifest.to_string()).unwrap();
    fs::write(dir.path().join("a.md"), "a").unwrap();
    fs::write(dir.path().join("b.md"), "b").unwrap();
    assert!(matches!(load_corpus(dir.path()), Err(ExtractionError::Corpus(_))));
}
