//! Replays the checked-in fuzz corpus through the parsers on stable, and
//! throws random text at them. Fuzzing proper needs a nightly toolchain.

use std::fs;
use std::path::{Path, PathBuf};

use proptest::prelude::*;
use riskscope_core::case_model::{serialize_case, CaseInput};
use riskscope_core::eval::{parse_labels, GoldCase};
use riskscope_core::extraction::{parse_pattern_array, parse_scenario_sections, parse_score};
use riskscope_core::flywheel::{format_law_holds, split_separator};
use riskscope_core::gateway::MockScript;
use riskscope_core::jsonl::parse_lines;
use riskscope_core::kb::KbEntry;
use riskscope_core::pipeline::parse_claims;
use riskscope_core::rnr::parse_verdicts;
use riskscope_core::text::extract_json_array;

fn run_all(data: &str) {
    if let Ok(claims) = parse_claims(data) {
        assert!(claims.iter().all(|c| !c.text.trim().is_empty()));
    }
    if parse_verdicts(data, false).is_ok() {
        assert!(parse_verdicts(data, true).is_ok());
    }
    if let Some(s) = parse_score(data) {
        assert!((1..=5).contains(&s));
    }
    let _ = parse_scenario_sections(data);
    let _ = parse_pattern_array(data);
    let _ = extract_json_array(data);
    let _ = parse_labels(data);
    if let Ok(case) = CaseInput::from_json(data) {
        let _ = serialize_case(&case);
    }
    let _ = parse_lines::<KbEntry>(data, Path::new("seed"));
    let _ = parse_lines::<GoldCase>(data, Path::new("seed"));
    let _ = MockScript::parse(data);
    if let Some((head, tail)) = split_separator(data) {
        assert!(head.len() + tail.len() <= data.len());
    }
    let _ = format_law_holds(data, &["a"], &["b"]);
}

fn corpus_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus")
}

#[test]
fn every_seed_parses_without_panicking() {
    let mut seeds = 0;
    for target in fs::read_dir(corpus_dir()).unwrap() {
        for seed in fs::read_dir(target.unwrap().path()).unwrap() {
            let bytes = fs::read(seed.unwrap().path()).unwrap();
            run_all(&String::from_utf8_lossy(&bytes));
            seeds += 1;
        }
    }
    assert!(seeds >= 12, "only {seeds} seeds found");
}

#[test]
fn seeds_that_should_parse_do() {
    let read = |t: &str, n: &str| fs::read_to_string(corpus_dir().join(t).join(n)).unwrap();
    assert_eq!(parse_claims(&read("parse_claims", "golden")).unwrap().len(), 4);
    assert_eq!(parse_verdicts(&read("parse_verdicts", "fact"), false).unwrap().len(), 4);
    assert!(CaseInput::from_json(&read("case_input", "golden")).is_ok());
    assert_eq!(
        parse_lines::<KbEntry>(&read("jsonl_records", "kb"), Path::new("kb"))
            .unwrap()
            .len(),
        5
    );
    assert!(MockScript::parse(&read("mock_script", "golden")).is_ok());
}

proptest! {
    #[test]
    fn arbitrary_text_never_panics(data in "\\PC{0,200}") {
        run_all(&data);
    }

    #[test]
    fn json_shaped_text_never_panics(data in "[\\[\\]{}\":,a-z0-9 \\n-]{0,120}") {
        run_all(&data);
    }
}
